"""Policy-gradient fine-tuning of a denoiser's adapters on the style-ambiguity reward.

Each reverse step ``x_t -> x_{t-1}`` is an action of a Gaussian policy; every step
of a trajectory shares the terminal reward's normalized advantage. Updates ascend
the clipped surrogate ``min(rho * A, clamp(rho, 1 - eps, 1 + eps) * A)``.
"""
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_image_tensor, as_rng, torch_generator
from .diffusion import DenoisingTrajectory, denoising_loss, sample, step_log_prob
from .exceptions import ConfigError, NumericError
from .lora import adapter_parameters, attach_lora, save_adapters
from .models import HashTextEncoder
from .prompts import PromptSource
from .reward import PerPromptStatTracker, normalize_advantages, style_ambiguity_reward

LOG_RATIO_LIMIT = 20.0


@dataclass
class DDPOConfig:
    """Optimization settings. ``batch_size`` is the per-step micro-batch.

    One optimizer step consumes ``batch_size * grad_accum_steps`` trajectories
    (the effective batch); an epoch samples ``batches_per_epoch`` effective batches.
    """

    epochs: int = 50
    batches_per_epoch: int = 32
    batch_size: int = 8
    grad_accum_steps: int = 1
    inner_epochs: int = 1
    clip_epsilon: float = 1e-4
    lr: float = 3e-4
    betas: tuple = (0.9, 0.99)
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    lora_rank: int = 4
    lora_alpha: float = 4.0
    log_ratio_limit: float = LOG_RATIO_LIMIT

    def __post_init__(self):
        self.betas = tuple(self.betas)
        errors = []
        for name in ("epochs", "batches_per_epoch", "batch_size", "grad_accum_steps", "inner_epochs", "lora_rank"):
            if int(getattr(self, name)) < 1:
                errors.append(f"{name} must be >= 1")
        if not self.clip_epsilon > 0:
            errors.append("clip_epsilon must be positive")
        if self.lr < 0:
            errors.append("lr must be >= 0")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            errors.append("max_grad_norm must be positive when set")
        if errors:
            raise ConfigError("; ".join(errors), errors)

    @property
    def effective_batch_size(self):
        return self.batch_size * self.grad_accum_steps


@dataclass
class RolloutBatch:
    """A batched trajectory plus its reward records, one per sample."""

    trajectory: DenoisingTrajectory
    records: list

    def __len__(self):
        return self.trajectory.batch_size

    @property
    def rewards(self):
        return np.array([r.raw_reward for r in self.records])

    @property
    def advantages(self):
        return torch.tensor([r.normalized_advantage for r in self.records], dtype=self.trajectory.states.dtype)

    def select(self, idx):
        idx = list(idx)
        t = self.trajectory
        ctx = t.context[idx] if isinstance(t.context, torch.Tensor) else t.context
        sub = DenoisingTrajectory(
            list(t.timesteps), t.states[:, idx], t.actions[:, idx], t.log_probs[:, idx], list(t.stddevs), ctx,
            [t.prompts[i] for i in idx] if t.prompts else [],
        )
        return RolloutBatch(sub, [self.records[i] for i in idx])


@dataclass
class UpdateReport:
    surrogate: float
    clip_fraction: float
    skipped_steps: int
    approx_kl: float
    n_optimizer_steps: int
    grad_norms: list = field(default_factory=list)


def collect_rollouts(predictor, prompts, classifier, schedule, generator, text_encoder, image_shape,
                     tracker=None, classifier_id=""):
    """Sample one trajectory per prompt and attach rewards.

    With ``tracker`` the rewards are also advantage-normalized per prompt.
    """
    if len(prompts) < 1:
        raise ConfigError("collect_rollouts needs at least one prompt")
    context = text_encoder(prompts)
    try:
        x0, traj = sample(predictor, context, schedule, generator, shape=(len(prompts), *image_shape), record_trajectory=True)
    except NumericError as exc:
        raise NumericError("rollout sampling failed", **exc.context) from exc
    traj.prompts = list(prompts)
    records = style_ambiguity_reward(x0, classifier, prompts, classifier_id)
    if tracker is not None:
        normalize_advantages(records, tracker)
    return RolloutBatch(traj, records)


def clipped_surrogate(log_ratio, advantages, clip_epsilon):
    """Per-element ``min(rho A, clamp(rho) A)`` and the matching unclipped term."""
    ratio = torch.exp(log_ratio)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantages
    return torch.minimum(unclipped, clipped), unclipped


def _surrogate_terms(predictor, batch, schedule, config):
    """Yield (surrogate sum, unclipped sum, #valid, #clipped, #skipped, kl sum) per policy step."""
    traj = batch.trajectory
    adv = batch.advantages
    for i in traj.policy_steps():
        new_lp = step_log_prob(predictor, traj, i, schedule)
        log_ratio = new_lp - traj.log_probs[i]
        valid = log_ratio.detach().abs() <= config.log_ratio_limit
        safe = torch.where(valid, log_ratio, torch.zeros_like(log_ratio))
        surr, unclipped = clipped_surrogate(safe, adv, config.clip_epsilon)
        if torch.any(surr.detach() > unclipped.detach() + 1e-12):
            raise NumericError("clipped surrogate exceeded the unclipped one", t=traj.timesteps[i])
        ratio = torch.exp(safe.detach())
        n_clip = int(((ratio - 1.0).abs() > config.clip_epsilon)[valid].sum())
        kl = float((0.5 * safe.detach() ** 2)[valid].sum())
        yield surr[valid].sum(), unclipped[valid].sum(), int(valid.sum()), n_clip, int((~valid).sum()), kl


def policy_update(predictor, rollouts, optimizer, config, schedule, generator=None):
    """Ascend the clipped surrogate over ``rollouts`` for ``config.inner_epochs`` passes.

    Samples are shuffled (with ``generator``) and grouped into effective batches of
    ``config.batch_size * config.grad_accum_steps``. Returns an :class:`UpdateReport`.
    """
    if isinstance(rollouts, RolloutBatch):
        rollouts = [rollouts]
    if not rollouts:
        raise ConfigError("policy_update needs at least one rollout batch")
    for rb in rollouts:
        if not torch.isfinite(rb.advantages).all():
            raise NumericError("non-finite advantages")
    flat = [(j, b) for j, rb in enumerate(rollouts) for b in range(len(rb))]
    params = [p for g in optimizer.param_groups for p in g["params"]]
    total_surr = 0.0
    n_valid = n_clip = n_skip = 0
    kl_sum = 0.0
    n_steps = 0
    grad_norms = []
    for _ in range(config.inner_epochs):
        order = torch.randperm(len(flat), generator=generator).tolist() if generator is not None else range(len(flat))
        items = [flat[k] for k in order]
        eff = config.effective_batch_size
        for start in range(0, len(items), eff):
            group = items[start : start + eff]
            micro = [group[k : k + config.batch_size] for k in range(0, len(group), config.batch_size)]
            per_sample_steps = len(rollouts[0].trajectory.policy_steps())
            denom = max(1, len(group) * per_sample_steps)
            optimizer.zero_grad(set_to_none=True)
            for mb in micro:
                for j in sorted({j for j, _ in mb}):
                    batch = rollouts[j].select([b for jj, b in mb if jj == j])
                    for surr, _unclipped, nv, nc, ns, kl in _surrogate_terms(predictor, batch, schedule, config):
                        loss = -surr / denom
                        if loss.requires_grad:
                            loss.backward()
                        total_surr += surr.item()
                        n_valid += nv
                        n_clip += nc
                        n_skip += ns
                        kl_sum += kl
            norm = torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm if config.max_grad_norm is not None else math.inf)
            grad_norms.append(float(norm))
            optimizer.step()
            n_steps += 1
    return UpdateReport(
        surrogate=total_surr / max(n_valid, 1),
        clip_fraction=n_clip / max(n_valid, 1),
        skipped_steps=n_skip,
        approx_kl=kl_sum / max(n_valid, 1),
        n_optimizer_steps=n_steps,
        grad_norms=grad_norms,
    )


def make_optimizer(params, config):
    return torch.optim.AdamW(params, lr=config.lr, betas=config.betas, eps=config.adam_eps, weight_decay=config.weight_decay)


def pretrain_denoiser(predictor, images, schedule, text_encoder=None, prompt_source=None, steps=1000, batch_size=64,
                      lr=1e-3, random_state=0):
    """Fit ``predictor`` with the noise-prediction loss on ``images``; returns the loss curve.

    Contexts come from prompts drawn from ``prompt_source`` so that the model sees
    both conditioned and null contexts.
    """
    x = as_image_tensor(images, dtype=torch.get_default_dtype())
    text_encoder = text_encoder or HashTextEncoder()
    prompt_source = prompt_source or PromptSource()
    rng = as_rng(random_state)
    gen = torch_generator(random_state)
    opt = torch.optim.Adam([p for p in predictor.parameters() if p.requires_grad], lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, x.shape[0], (batch_size,), generator=gen)
        ctx = text_encoder(prompt_source.draw(batch_size, rng))
        loss = denoising_loss(predictor, x[idx], ctx, schedule, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


class DDPOTrainer(BaseEstimator):
    """Estimator wrapper that attaches adapters to ``predictor`` and trains them.

    ``fit()`` takes no data: rollouts are sampled from the model itself. Per-epoch
    summaries land in ``history_`` and, with ``log_path``, in a JSONL file;
    ``checkpoint_dir`` receives one adapter file per epoch.
    """

    def __init__(self, predictor=None, classifier=None, schedule=None, text_encoder=None, prompt_source=None,
                 image_shape=(8, 8, 3), config=None, classifier_id="", tracker_buffer=None, random_state=0,
                 log_path=None, checkpoint_dir=None, callback=None):
        self.predictor = predictor
        self.classifier = classifier
        self.schedule = schedule
        self.text_encoder = text_encoder
        self.prompt_source = prompt_source
        self.image_shape = image_shape
        self.config = config
        self.classifier_id = classifier_id
        self.tracker_buffer = tracker_buffer
        self.random_state = random_state
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir
        self.callback = callback

    def _setup(self):
        if self.predictor is None or self.classifier is None or self.schedule is None:
            raise ConfigError("DDPOTrainer needs a predictor, a classifier and a schedule")
        self.config_ = self.config or DDPOConfig()
        self.text_encoder_ = self.text_encoder or HashTextEncoder()
        self.prompt_source_ = self.prompt_source or PromptSource()
        torch.manual_seed(self.random_state)
        self.adapter_names_ = attach_lora(self.predictor, self.config_.lora_rank, self.config_.lora_alpha)
        self.optimizer_ = make_optimizer(adapter_parameters(self.predictor), self.config_)
        self.generator_ = torch_generator(self.random_state)
        self.rng_ = as_rng(self.random_state)
        self.tracker_ = PerPromptStatTracker(buffer_size=self.tracker_buffer)
        self.history_ = []

    def fit(self, X=None, y=None):
        self._setup()
        if self.log_path is not None:
            Path(self.log_path).write_text("")
        for epoch in range(self.config_.epochs):
            self._run_epoch(epoch)
        return self

    def _run_epoch(self, epoch):
        cfg = self.config_
        start = time.perf_counter()
        rollouts = []
        for b in range(cfg.batches_per_epoch):
            prompts = self.prompt_source_.draw(cfg.effective_batch_size, self.rng_)
            try:
                rollouts.append(
                    collect_rollouts(self.predictor, prompts, self.classifier, self.schedule, self.generator_,
                                     self.text_encoder_, self.image_shape, self.tracker_, self.classifier_id)
                )
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {b}: {exc}", epoch=epoch, batch=b) from exc
        self.last_rollouts_ = rollouts
        report = policy_update(self.predictor, rollouts, self.optimizer_, cfg, self.schedule, self.generator_)
        rewards = np.concatenate([rb.rewards for rb in rollouts])
        row = {
            "epoch": epoch,
            "mean_reward": float(rewards.mean()),
            "reward_std": float(rewards.std()),
            "clip_fraction": report.clip_fraction,
            "skipped_steps": report.skipped_steps,
        }
        self.history_.append({**row, "surrogate": report.surrogate, "approx_kl": report.approx_kl,
                              "seconds": time.perf_counter() - start})
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if self.checkpoint_dir is not None:
            Path(self.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_adapters(self.predictor, Path(self.checkpoint_dir) / f"adapters-epoch{epoch:03d}.pt",
                          extra={"epoch": epoch, "config": asdict(cfg)})
        if self.callback is not None:
            self.callback(self, row)
        return row

    @property
    def mean_rewards_(self):
        check_is_fitted(self, "history_")
        return np.array([h["mean_reward"] for h in self.history_])

    def reward_improvement(self, window=5):
        """Mean reward of the last ``window`` epochs minus that of the first ``window``."""
        r = self.mean_rewards_
        return float(r[-window:].mean() - r[:window].mean())

    @torch.no_grad()
    def generate(self, prompts, seed=0):
        check_is_fitted(self, "history_")
        ctx = self.text_encoder_(prompts)
        x0, _ = sample(self.predictor, ctx, self.schedule, torch_generator(seed), shape=(len(prompts), *self.image_shape))
        return x0

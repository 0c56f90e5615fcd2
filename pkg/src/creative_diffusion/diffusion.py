"""DDPM forward/reverse processes with per-step log-probabilities.

Steps are 1-indexed: ``t = T`` is pure noise and ``t = 1`` produces ``x_0``.
Images are channel-last tensors in [-1, 1].
"""
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import check_same_shape
from .exceptions import DomainError, NumericError, RangeError, ScheduleError

VARIANCES = ("posterior", "beta")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise coefficients.

    ``timesteps`` are the indices handed to the noise predictor; they differ from
    ``1..T`` only for schedules respaced from a longer training schedule.
    ``variance`` selects the reverse-step variance: ``"posterior"`` uses
    ``(1 - abar_{t-1}) / (1 - abar_t) * beta_t`` (zero at ``t = 1``), ``"beta"`` uses ``beta_t``.
    """

    beta: np.ndarray
    variance: str = "posterior"
    timesteps: np.ndarray = None

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size == 0:
            raise ScheduleError("beta must be a non-empty 1-D sequence")
        if not np.all((beta > 0) & (beta < 1)):
            raise ScheduleError("every beta must lie in (0, 1)")
        if self.variance not in VARIANCES:
            raise ScheduleError(f"variance must be one of {VARIANCES}, got {self.variance!r}")
        ts = np.arange(1, beta.size + 1) if self.timesteps is None else np.asarray(self.timesteps)
        if ts.shape != beta.shape:
            raise ScheduleError("timesteps must match beta in length")
        beta.setflags(write=False)
        ts = ts.astype(np.int64)
        ts.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "timesteps", ts)

    @property
    def T(self):
        return self.beta.size

    @property
    def alpha(self):
        return 1.0 - self.beta

    @property
    def alpha_bar(self):
        return np.cumprod(self.alpha)

    @property
    def alpha_bar_prev(self):
        return np.concatenate([[1.0], self.alpha_bar[:-1]])

    @property
    def sigma_sq(self):
        if self.variance == "beta":
            return self.beta.copy()
        return (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar) * self.beta

    def _check_t(self, t):
        if not 1 <= t <= self.T:
            raise RangeError(f"step {t} outside [1, {self.T}]")
        return t - 1

    def coefficients(self, t):
        """(alpha_t, alpha_bar_t, sigma_t) as python floats for step ``t``."""
        i = self._check_t(int(t))
        return float(self.alpha[i]), float(self.alpha_bar[i]), math.sqrt(float(self.sigma_sq[i]))

    def model_timestep(self, t):
        return int(self.timesteps[self._check_t(int(t))])

    @classmethod
    def linear(cls, T, beta_start=1e-4, beta_end=0.02, variance="posterior"):
        if T < 1:
            raise ScheduleError("T must be a positive integer")
        beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
        return cls(beta, variance)

    @classmethod
    def cosine(cls, T, s=0.008, max_beta=0.999, variance="posterior"):
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 1e-8, max_beta)
        return cls(beta, variance)

    def respace(self, n_steps):
        """Subsample ``n_steps`` evenly spaced steps, preserving ``alpha_bar`` at the kept steps."""
        if not 1 <= n_steps <= self.T:
            raise ScheduleError(f"cannot respace {self.T} steps to {n_steps}")
        keep = np.unique(np.round(np.linspace(1, self.T, n_steps)).astype(np.int64))
        abar = self.alpha_bar[keep - 1]
        prev = np.concatenate([[1.0], abar[:-1]])
        beta = 1.0 - abar / prev
        return NoiseSchedule(beta, self.variance, self.timesteps[keep - 1])

    def to_dict(self):
        return {
            "beta": self.beta.tolist(),
            "variance": self.variance,
            "timesteps": self.timesteps.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["beta"]), d.get("variance", "posterior"), d.get("timesteps"))


def default_schedule(inference_steps=30, train_steps=1000, variance="posterior"):
    """Linear 1e-4..0.02 training schedule respaced to ``inference_steps``."""
    return NoiseSchedule.linear(train_steps, 1e-4, 0.02, variance).respace(inference_steps)


class IdentityCodec:
    """Pixel-space stand-in for a latent autoencoder."""

    tolerance = 0.0

    def encode(self, x):
        return x

    def decode(self, z):
        return z


def reconstruction_error(codec, x):
    return float(torch.max(torch.abs(codec.decode(codec.encode(x)) - x)))


def _expand(coef, x):
    if isinstance(coef, torch.Tensor) and coef.ndim == 1:
        return coef.reshape(-1, *([1] * (x.ndim - 1))).to(x.dtype)
    return coef


def forward_diffuse(x0, t, noise, schedule):
    """Closed-form ``q(x_t | x_0)`` draw: ``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``.

    ``t`` is an int or a 1-D tensor of per-example steps.
    """
    check_same_shape(x0, noise, "x0 and noise")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        t = t.to(torch.int64)
        if t.numel() and (t.min() < 1 or t.max() > schedule.T):
            raise RangeError(f"steps must lie in [1, {schedule.T}]")
        abar = torch.as_tensor(schedule.alpha_bar, dtype=x0.dtype)[t - 1]
    else:
        abar = schedule.coefficients(int(t))[1]
        abar = torch.tensor(abar, dtype=x0.dtype)
    abar = _expand(abar, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * noise


def _model_t(schedule, t, batch):
    ts = torch.tensor(schedule.timesteps.tolist(), dtype=torch.int64)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return ts[t.to(torch.int64) - 1]
    return ts[int(t) - 1].expand(batch)


def denoising_loss(predictor, x0, context, schedule, generator=None, t=None, noise=None):
    """Mean squared error between the injected noise and the predictor's estimate.

    ``t`` (per-example, 1-indexed) and ``noise`` are drawn when not supplied.
    """
    batch = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (batch,), generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = forward_diffuse(x0, t, noise, schedule)
    eps = predictor(x_t, _model_t(schedule, t, batch), context)
    if not torch.isfinite(eps).all():
        raise NumericError("predictor returned non-finite values", t=t.tolist())
    return torch.mean((noise - eps) ** 2)


def reverse_mean(x_t, eps, alpha, alpha_bar):
    return (x_t - ((1.0 - alpha) / math.sqrt(1.0 - alpha_bar)) * eps) / math.sqrt(alpha)


def reverse_step(x_t, t, predictor, context, schedule, z):
    """One ancestral step. Returns ``(x_prev, mean, stddev)``."""
    t = int(t)
    if t == 0:
        raise RangeError("reverse_step needs t >= 1")
    alpha, alpha_bar, sigma = schedule.coefficients(t)
    if not math.isfinite(sigma):
        raise ScheduleError(f"sigma undefined at step {t}")
    check_same_shape(x_t, z, "x_t and z")
    eps = predictor(x_t, _model_t(schedule, t, x_t.shape[0]), context)
    if not torch.isfinite(eps).all():
        raise NumericError("predictor returned non-finite values", t=t)
    mean = reverse_mean(x_t, eps, alpha, alpha_bar)
    return mean + sigma * z, mean, sigma


_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_log_prob(x, mean, stddev, batch_ndim=0):
    """Isotropic Gaussian log-density, summed over all but the first ``batch_ndim`` axes."""
    if not stddev > 0:
        raise DomainError(f"stddev must be positive, got {stddev}")
    x = torch.as_tensor(x)
    mean = torch.as_tensor(mean, dtype=x.dtype)
    elem = -((x - mean) ** 2) / (2.0 * stddev**2) - math.log(stddev) - _HALF_LOG_2PI
    dims = tuple(range(batch_ndim, elem.ndim))
    return elem.sum(dim=dims) if dims else elem


@dataclass
class DenoisingTrajectory:
    """Recorded reverse-diffusion rollout for a batch.

    Step-indexed fields are stacked on axis 0 in sampling order (``t = T`` first):
    ``states`` holds ``x_t``, ``actions`` holds ``x_{t-1}``. ``log_probs`` is
    (steps, batch) and is NaN for zero-variance steps, which carry no policy gradient.
    """

    timesteps: list
    states: torch.Tensor
    actions: torch.Tensor
    log_probs: torch.Tensor
    stddevs: list
    context: object = None
    prompts: list = field(default_factory=list)

    @property
    def batch_size(self):
        return self.states.shape[1]

    @property
    def final_images(self):
        return self.actions[-1]

    def __len__(self):
        return len(self.timesteps)

    def policy_steps(self):
        """Indices of steps with positive variance."""
        return [i for i, s in enumerate(self.stddevs) if s > 0]

    def detach(self):
        return DenoisingTrajectory(
            list(self.timesteps),
            self.states.detach(),
            self.actions.detach(),
            self.log_probs.detach(),
            list(self.stddevs),
            self.context,
            list(self.prompts),
        )

    def to_records(self):
        """Per-step audit rows: (t, sample index, action checksum, log-prob)."""
        rows = []
        for i, t in enumerate(self.timesteps):
            acts = self.actions[i].detach().to(torch.float64).reshape(self.batch_size, -1)
            sums = acts.sum(dim=1)
            for b in range(self.batch_size):
                rows.append((t, b, float(sums[b]), float(self.log_probs[i, b])))
        return rows


TRAJECTORY_RECORD_DTYPE = np.dtype(
    [("t", "<i4"), ("sample", "<i4"), ("action_checksum", "<f8"), ("log_prob", "<f8")]
)


def save_trajectory_records(trajectory, path):
    """Write the audit rows of ``trajectory`` as a numpy structured binary (.npy)."""
    arr = np.array(trajectory.to_records(), dtype=TRAJECTORY_RECORD_DTYPE)
    np.save(path, arr, allow_pickle=False)
    return arr


def load_trajectory_records(path):
    return np.load(path, allow_pickle=False)


@torch.no_grad()
def sample(predictor, context, schedule, generator=None, shape=None, record_trajectory=False, x_T=None):
    """Ancestral sampling from ``x_T ~ N(0, I)`` down to ``x_0``.

    ``shape`` is the batch shape (batch, h, w, c) unless ``x_T`` is given.
    Returns ``(x0, trajectory or None)``.
    """
    if x_T is None:
        if shape is None:
            raise ValueError("either shape or x_T is required")
        x_T = torch.randn(tuple(shape), generator=generator)
    x = x_T
    timesteps, states, actions, log_probs, stds = [], [], [], [], []
    for t in range(schedule.T, 0, -1):
        z = torch.randn(x.shape, generator=generator, dtype=x.dtype)
        try:
            x_prev, mean, sigma = reverse_step(x, t, predictor, context, schedule, z)
        except NumericError as exc:
            raise NumericError("sampling failed", t=t) from exc
        if record_trajectory:
            timesteps.append(t)
            states.append(x)
            actions.append(x_prev)
            stds.append(sigma)
            if sigma > 0:
                log_probs.append(gaussian_log_prob(x_prev, mean, sigma, batch_ndim=1))
            else:
                log_probs.append(torch.full((x.shape[0],), float("nan"), dtype=x.dtype))
        x = x_prev
    if not record_trajectory:
        return x, None
    traj = DenoisingTrajectory(
        timesteps,
        torch.stack(states),
        torch.stack(actions),
        torch.stack(log_probs),
        stds,
        context,
    )
    return x, traj


def step_log_prob(predictor, trajectory, step_index, schedule):
    """Recompute the log-probability of the stored action at one recorded step."""
    t = trajectory.timesteps[step_index]
    x_t = trajectory.states[step_index]
    _, mean, sigma = reverse_step(x_t, t, predictor, trajectory.context, schedule, torch.zeros_like(x_t))
    return gaussian_log_prob(trajectory.actions[step_index], mean, sigma, batch_ndim=1)

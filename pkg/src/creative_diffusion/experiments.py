"""Experiment runners behind the command line: one function per mode plus shared builders."""
import copy
import json
import time
import traceback
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .can import CreativeAdversarialNetwork, StyleHead
from .classifiers import CLIPStyleClassifier, GANStyleClassifier, KMeansStyleClassifier
from .data import balance_classes, load_image, make_styled_shapes, scan_image_folder
from .ddpo import DDPOConfig, DDPOTrainer, pretrain_denoiser
from .diffusion import NoiseSchedule
from .embedding import ToyEmbedder
from .evaluation import (
    AestheticStubScorer,
    AmbiguityScorer,
    ExternalScorer,
    ModelUnderTest,
    PromptSimilarityScorer,
    evaluate_run,
    export_grids,
    generate,
)
from .exceptions import ConfigError
from .kmeans import ClusterSet, fit_kmeans
from .lora import load_adapters
from .models import CrossAttentionDenoiser, HashTextEncoder, load_denoiser, save_denoiser
from .prompts import STYLES, PromptSource, PromptSpec
from .reward import MetricsWriter

MANIFEST_VERSION = 1


def image_shape(cfg):
    return (cfg.image_dim, cfg.image_dim, 3)


def build_corpus(cfg):
    """Images (n, h, w, 3) in [-1, 1], integer labels and class names."""
    d = cfg.data
    if d.image_root is None:
        images, labels = make_styled_shapes(d.n_per_style, cfg.image_dim, d.n_styles, rng=cfg.seed)
        return images, labels, [f"style-{i}" for i in range(d.n_styles)]
    manifest = scan_image_folder(d.image_root)
    raw = {name: [] for name in manifest.class_names}
    for path, idx in manifest.records:
        raw[manifest.class_names[idx]].append(path)
    if d.n_per_class is not None:
        pairs = balance_classes(raw, d.n_per_class, rng=cfg.seed).items()
    else:
        pairs = [(path, idx) for path, idx in manifest.records]
    names = list(manifest.class_names)
    images = np.stack([load_image(p, cfg.image_dim) for p, _ in pairs]).astype(np.float32)
    labels = np.array([label for _, label in pairs], dtype=np.int64)
    return images, labels, names


def build_embedder(cfg):
    return ToyEmbedder(dim=cfg.reward.embed_dim, scale=cfg.reward.embed_scale, seed=0)


def build_prompt_source(cfg):
    p = cfg.prompts
    return PromptSource(tuple(p.mediums), tuple(p.subjects), p.null_probability)


def build_classifier(cfg, images):
    """The reward classifier named by ``cfg.classifier``; returns (classifier, id)."""
    r = cfg.reward
    emb = build_embedder(cfg)
    if cfg.classifier == "clip":
        return CLIPStyleClassifier(STYLES, emb, r.temperature).fit(), "clip"
    if cfg.classifier in ("kmeans_text", "kmeans_image"):
        source = cfg.classifier.split("_")[1]
        if r.centers is not None:
            clusters = ClusterSet.load(r.centers)
        else:
            clusters = centers_for(cfg, source, r.k, images)
        return KMeansStyleClassifier(provider=emb, epsilon=r.epsilon, clusters=clusters).fit(), cfg.classifier
    head, names = StyleHead.load(r.head_checkpoint)
    if head.image_dim != cfg.image_dim:
        raise ConfigError(f"style head is {head.image_dim}px but image_dim is {cfg.image_dim}",
                          [f"reward.head_checkpoint: resolution {head.image_dim} does not match image_dim {cfg.image_dim}"])
    return GANStyleClassifier(head, tuple(names)).fit(), "dcgan"


def centers_for(cfg, source, k, images=None):
    """Fit k-means centers on style-name embeddings (``text``) or corpus image embeddings."""
    emb = build_embedder(cfg)
    if source == "text":
        vectors = emb.embed_text(list(STYLES))
    else:
        if images is None:
            images, _, _ = build_corpus(cfg)
        with torch.no_grad():
            vectors = emb.embed_image(torch.as_tensor(images))
    vectors = vectors.to(torch.float64).numpy()
    return fit_kmeans(vectors, k, cfg.seed, source=source)


def fit_centers(cfg, source, k, out_path):
    clusters = centers_for(cfg, source, k)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    clusters.save(out_path)
    return clusters


def new_denoiser(cfg):
    torch.manual_seed(cfg.seed)
    m = cfg.model
    return CrossAttentionDenoiser(image_shape(cfg), hidden=m.hidden, context_dim=m.context_dim, patch=m.patch)


def train_schedule(cfg):
    return NoiseSchedule.linear(cfg.schedule.train_steps, variance=cfg.schedule.variance)


def inference_schedule(cfg):
    return train_schedule(cfg).respace(cfg.schedule.inference_steps)


def text_encoder(cfg):
    return HashTextEncoder(dim=cfg.model.context_dim)


def base_denoiser(cfg, images, out, metrics):
    """Load ``model.checkpoint`` or pretrain a fresh denoiser on the corpus; saves ``base.pt``."""
    if cfg.model.checkpoint is not None:
        model, _ = load_denoiser(cfg.model.checkpoint)
        return model
    model = new_denoiser(cfg)
    m = cfg.model
    losses = pretrain_denoiser(model, images, train_schedule(cfg), text_encoder(cfg), build_prompt_source(cfg),
                               steps=m.pretrain_steps, batch_size=m.pretrain_batch, lr=m.pretrain_lr, random_state=cfg.seed)
    window = max(1, len(losses) // 10)
    for i in range(0, len(losses), window):
        metrics.write({"kind": "pretrain", "step": i, "loss": float(np.mean(losses[i : i + window]))})
    save_denoiser(model, out / "base.pt", extra={"seed": cfg.seed})
    return model


def grid_prompts(cfg):
    src = build_prompt_source(cfg)
    prompts = [PromptSpec(m, s) for m in src.mediums for s in src.subjects]
    if src.null_probability > 0:
        prompts.append(PromptSpec.null())
    return [p for p in prompts for _ in range(cfg.grid.images_per_prompt)]


def write_grids(cfg, predictor, schedule, directory):
    prompts = grid_prompts(cfg)
    images = generate(ModelUnderTest("grid", predictor, schedule), prompts, text_encoder(cfg), image_shape(cfg), cfg.seed)
    return export_grids(images, prompts, cfg.seed, directory, scale=cfg.grid.scale)


def run_ddpo(cfg, out, metrics):
    images, _, _ = build_corpus(cfg)
    predictor = base_denoiser(cfg, images, out, metrics)
    classifier, classifier_id = build_classifier(cfg, images)
    t = cfg.trainer
    ddpo_cfg = DDPOConfig(
        epochs=t.epochs, batches_per_epoch=t.batches_per_epoch, batch_size=t.batch_size, grad_accum_steps=t.grad_accum_steps,
        inner_epochs=t.inner_epochs, clip_epsilon=t.clip_epsilon, lr=t.lr, betas=tuple(t.betas), weight_decay=t.weight_decay,
        adam_eps=t.adam_eps, max_grad_norm=t.max_grad_norm, lora_rank=t.lora_rank, lora_alpha=t.lora_alpha,
    )

    def on_epoch(trainer, row):
        metrics.write_rewards(row["epoch"], [rec for rb in trainer.last_rollouts_ for rec in rb.records])
        metrics.write({"kind": "epoch", **row})

    trainer = DDPOTrainer(
        predictor, classifier, inference_schedule(cfg), text_encoder(cfg), build_prompt_source(cfg), image_shape(cfg),
        ddpo_cfg, classifier_id, random_state=cfg.seed, log_path=out / "training_log.jsonl",
        checkpoint_dir=out / "checkpoints", callback=on_epoch,
    ).fit()
    grids = write_grids(cfg, trainer.predictor, inference_schedule(cfg), out / "grids")
    return {"mean_rewards": trainer.mean_rewards_.tolist(), "reward_improvement_5": trainer.reward_improvement(5)
            if len(trainer.history_) >= 10 else None, "grids": [p.name for p in grids]}


def run_can(cfg, out, metrics):
    images, labels, names = build_corpus(cfg)
    c = cfg.can
    if labels.max() >= c.n_styles:
        raise ConfigError("corpus has more classes than style logits", [f"can.n_styles: {c.n_styles} < {labels.max() + 1} classes"])
    class_names = tuple(STYLES) if c.n_styles == len(STYLES) else tuple(f"style-{i}" for i in range(c.n_styles))
    ambiguity = None
    if cfg.classifier != "dcgan":
        ambiguity, _ = build_classifier(cfg, images)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(images))
    n_held = max(1, len(images) // 5)
    held, train = perm[:n_held], perm[n_held:]

    def on_epoch(est, summary):
        row = {"kind": "can_epoch", **summary, "heldout_style_accuracy": est.style_accuracy(images[held], labels[held])}
        metrics.write(row)

    est = CreativeAdversarialNetwork(
        image_dim=cfg.image_dim, n_styles=c.n_styles, width_divisor=c.width_divisor, stem_channels=c.stem_channels,
        head_widths=tuple(c.head_widths), dropout=c.dropout, epochs=c.epochs, batch_size=c.batch_size, lr=c.lr,
        betas=tuple(c.betas), use_style_losses=c.use_style_losses, ambiguity_classifier=ambiguity,
        wasserstein_lambda=c.wasserstein_lambda, class_names=class_names, random_state=cfg.seed, callback=on_epoch,
    ).fit(images[train], labels[train])
    est.save(out / "can.pt")
    est.style_head().save(out / "style_head.pt", class_names)
    samples = est.sample(16, seed=cfg.seed)
    grids = export_grids(samples, [PromptSpec.null()] * 16, cfg.seed, out / "grids", scale=cfg.grid.scale)
    return {"final_heldout_style_accuracy": est.style_accuracy(images[held], labels[held]), "grids": [p.name for p in grids],
            "class_names": list(class_names), "corpus_classes": names}


def _torchscript_scorer(path):
    module = torch.jit.load(str(path))
    return lambda images, prompts: module(torch.as_tensor(images)).detach().numpy()


def run_evaluate(cfg, out, metrics):
    e = cfg.evaluate
    base, _ = load_denoiser(e.base_checkpoint)
    images, _, _ = build_corpus(cfg)
    classifier, classifier_id = build_classifier(cfg, images)
    sched = inference_schedule(cfg)
    models = [ModelUnderTest("baseline", base, sched)]
    for name, path in sorted(e.adapters.items()):
        tuned = copy.deepcopy(base)
        load_adapters(tuned, path)
        models.append(ModelUnderTest(name, tuned, sched))
    emb = build_embedder(cfg)
    available = {
        "ava": lambda: AestheticStubScorer(emb, seed=cfg.seed),
        "ambiguity_reward": lambda: AmbiguityScorer(classifier, provenance=classifier_id),
        "prompt_similarity": lambda: PromptSimilarityScorer(emb),
        "image_reward": lambda: ExternalScorer("image_reward", e.image_reward_weights, _torchscript_scorer),
    }
    unknown = [s for s in e.scorers if s not in available]
    if unknown:
        raise ConfigError("unknown scorers", [f"evaluate.scorers: unknown scorer {s!r}" for s in unknown])
    scorers = [available[s]() for s in e.scorers]
    prompts = build_prompt_source(cfg).draw(e.n_prompts, np.random.default_rng(cfg.seed))
    report = evaluate_run(
        models, prompts, scorers, text_encoder(cfg), image_shape(cfg),
        baseline=ModelUnderTest("baseline", base, train_schedule(cfg)), baseline_steps=tuple(e.baseline_steps),
        style_embedder=emb, n_style_pairs=e.n_style_pairs, seed=cfg.seed,
    )
    report.save(out)
    for row in report.rows:
        metrics.write({"kind": "evaluation", **row})
    return {"report": ["report.json", "report.csv"]}


RUNNERS = {"ddpo": run_ddpo, "can": run_can, "evaluate": run_evaluate}


def run(cfg):
    """Execute ``cfg`` and write metrics.jsonl plus manifest.json to the output directory.

    The manifest is written on failure too, with the traceback, and the error is re-raised.
    """
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "mode": cfg.mode,
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "torch_version": torch.__version__,
        "seed": cfg.seed,
        "status": "running",
    }
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    start = time.perf_counter()
    torch.manual_seed(cfg.seed)
    try:
        with MetricsWriter(metrics_path) as metrics:
            manifest["results"] = RUNNERS[cfg.mode](cfg, out, metrics)
        manifest["status"] = "ok"
    except Exception:
        manifest["status"] = "failed"
        manifest["error"] = traceback.format_exc()
        raise
    finally:
        manifest["wall_time_seconds"] = time.perf_counter() - start
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest

"""Scoring of trained models: prompt similarity, style similarity to baselines, plugin scorers."""
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ._validation import as_image_tensor, torch_generator
from .data import to_uint8
from .diffusion import sample
from .embedding import ToyEmbedder, unit_normalize
from .exceptions import DataError, ScorerUnavailable, ShapeError
from .models import parameter_digest
from .prompts import PromptSpec, prompt_slug
from .reward import ambiguity_rewards

UNAVAILABLE = "unavailable"


def _text(prompt):
    return prompt.text if isinstance(prompt, PromptSpec) else str(prompt)


def prompt_similarities(images, prompts, provider):
    """Cosine between each image and its prompt; ``None`` where the prompt is null."""
    x = as_image_tensor(images)
    if x.shape[0] != len(prompts):
        raise ShapeError(f"{x.shape[0]} images for {len(prompts)} prompts")
    texts = [_text(p) for p in prompts]
    keep = [i for i, t in enumerate(texts) if t]
    out = [None] * len(texts)
    if keep:
        with torch.no_grad():
            img = unit_normalize(provider.embed_image(x[keep]).to(torch.float64))
            txt = unit_normalize(provider.embed_text([texts[i] for i in keep]).to(torch.float64))
        cos = torch.clamp((img * txt).sum(-1), -1.0, 1.0)
        for i, c in zip(keep, cos.tolist()):
            out[i] = c
    return out


def prompt_similarity(image, prompt, provider):
    return prompt_similarities(as_image_tensor(image)[:1], [prompt], provider)[0]


@dataclass
class StyleSimilarityReport:
    """Mean style-embedding cosine between tuned and baseline samples, per baseline step count."""

    n_pairs: int
    means: dict
    per_pair: dict = field(default_factory=dict)

    def as_dict(self):
        return {"n_pairs": self.n_pairs, "means": {str(k): v for k, v in self.means.items()}}


def style_similarity_report(model, baseline, prompts, text_encoder, image_shape, baseline_steps=(30, 15, 10),
                            style_embedder=None, n_pairs=40, seed=0):
    """Compare ``model`` with ``baseline`` respaced to each step count, on matched prompts and noise."""
    style_embedder = style_embedder or ToyEmbedder()
    pair_prompts = [prompts[i % len(prompts)] for i in range(n_pairs)]
    tuned = generate(model, pair_prompts, text_encoder, image_shape, seed)
    means, per_pair = {}, {}
    for steps in baseline_steps:
        sched = baseline.schedule if steps == baseline.schedule.T else baseline.schedule.respace(steps)
        base = generate(ModelUnderTest(baseline.name, baseline.predictor, sched), pair_prompts, text_encoder, image_shape, seed)
        cos = pairwise_style_cosines(tuned, base, style_embedder)
        means[steps] = float(cos.mean())
        per_pair[steps] = cos.tolist()
    return StyleSimilarityReport(n_pairs, means, per_pair)


def pairwise_style_cosines(images_a, images_b, style_embedder):
    a, b = as_image_tensor(images_a), as_image_tensor(images_b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"image lists differ in length: {a.shape[0]} vs {b.shape[0]}")
    with torch.no_grad():
        ea = unit_normalize(style_embedder.embed_image(a).to(torch.float64))
        eb = unit_normalize(style_embedder.embed_image(b).to(torch.float64))
    return torch.clamp((ea * eb).sum(-1), -1.0, 1.0).numpy()


def style_similarity(images_a, images_b, style_embedder):
    """Mean pairwise cosine of style embeddings."""
    return float(pairwise_style_cosines(images_a, images_b, style_embedder).mean())


class ScorerPlugin:
    """Maps images (and optionally prompts) to one real score per image.

    ``provenance`` names the weights a score came from. ``load`` raises
    :class:`ScorerUnavailable` when those weights cannot be found.
    """

    name = "scorer"
    provenance = ""

    def load(self):
        return self

    def score(self, images, prompts=None):
        raise NotImplementedError


class AestheticStubScorer(ScorerPlugin):
    """Frozen embedder plus a seeded linear head; stands in for an AVA-trained predictor."""

    name = "ava"

    def __init__(self, provider=None, seed=0, bias=5.0):
        self.provider = provider or ToyEmbedder()
        self.seed = seed
        self.bias = bias
        w = np.random.default_rng(seed).standard_normal(self.provider.dim)
        self.weight = torch.as_tensor(w / np.linalg.norm(w))
        self.provenance = f"stub-head(seed={seed}) on {self.provider!r}"

    def score(self, images, prompts=None):
        with torch.no_grad():
            e = unit_normalize(self.provider.embed_image(as_image_tensor(images)).to(torch.float64))
        return (self.bias + e @ self.weight).numpy()


class AmbiguityScorer(ScorerPlugin):
    """Raw style-ambiguity reward under a fixed classifier."""

    def __init__(self, classifier, name="ambiguity_reward", provenance=""):
        self.classifier = classifier
        self.name = name
        self.provenance = provenance or type(classifier).__name__

    def score(self, images, prompts=None):
        return ambiguity_rewards(as_image_tensor(images), self.classifier)


class PromptSimilarityScorer(ScorerPlugin):
    name = "prompt_similarity"

    def __init__(self, provider=None):
        self.provider = provider or ToyEmbedder()
        self.provenance = repr(self.provider)

    def score(self, images, prompts=None):
        sims = prompt_similarities(images, prompts, self.provider)
        return np.array([np.nan if s is None else s for s in sims])


class ExternalScorer(ScorerPlugin):
    """Scorer whose weights live in a file; ``loader(path)`` returns a callable scorer."""

    def __init__(self, name, weights_path, loader):
        self.name = name
        self.weights_path = weights_path
        self.loader = loader
        self.provenance = str(weights_path)
        self._fn = None

    def load(self):
        if self.weights_path is None or not Path(self.weights_path).exists():
            raise ScorerUnavailable(f"{self.name}: weights not found at {self.weights_path}")
        self._fn = self.loader(self.weights_path)
        return self

    def score(self, images, prompts=None):
        if self._fn is None:
            self.load()
        return np.asarray(self._fn(images, prompts), dtype=np.float64)


@dataclass
class ModelUnderTest:
    name: str
    predictor: torch.nn.Module
    schedule: object


@torch.no_grad()
def generate(model, prompts, text_encoder, image_shape, seed):
    """Sample one image per prompt; ``x_T`` depends only on ``seed``, so samplers share it."""
    x_T = torch.randn((len(prompts), *image_shape), generator=torch_generator(seed))
    x0, _ = sample(model.predictor, text_encoder(prompts), model.schedule, torch_generator(seed + 1), x_T=x_T)
    return x0


@dataclass
class EvaluationReport:
    seed: int
    scorers: list
    provenance: dict
    rows: list
    style: dict = field(default_factory=dict)

    def as_dict(self):
        return {"seed": self.seed, "scorers": self.scorers, "provenance": self.provenance, "rows": self.rows, "style_similarity": self.style}

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True, indent=2)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", *self.scorers])
        for row in self.rows:
            writer.writerow([row["model"], *[_fmt(row[s]) for s in self.scorers]])
        if self.style:
            writer.writerow([])
            writer.writerow(["style_similarity", *[f"baseline_{k}" for k in self.style["means"]]])
            for name, block in self.style["models"].items():
                writer.writerow([name, *[_fmt(block[k]) for k in self.style["means"]]])
        return buf.getvalue()

    def save(self, directory, stem="report"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / f"{stem}.json").write_text(self.to_json() + "\n")
        (directory / f"{stem}.csv").write_text(self.to_csv())


def _fmt(v):
    return v if isinstance(v, str) else repr(float(v))


def evaluate_run(models, prompts, scorers, text_encoder, image_shape, baseline=None, baseline_steps=(30, 15, 10),
                 style_embedder=None, n_style_pairs=40, seed=0):
    """Score every model on ``prompts`` and compare styles against a step-respaced baseline.

    ``baseline`` is a :class:`ModelUnderTest` whose schedule is respaced to each of
    ``baseline_steps``. Scorers whose weights are missing get an ``unavailable``
    column instead of aborting the run. Model parameters are checked unchanged.
    """
    digests = {m.name: parameter_digest(m.predictor) for m in models}
    available, provenance = [], {}
    for sc in scorers:
        try:
            sc.load()
            available.append(sc)
            provenance[sc.name] = sc.provenance
        except ScorerUnavailable as exc:
            provenance[sc.name] = f"{UNAVAILABLE}: {exc}"
    rows = []
    for model in models:
        images = generate(model, prompts, text_encoder, image_shape, seed)
        row = {"model": model.name}
        for sc in scorers:
            if sc in available:
                vals = np.asarray(sc.score(images, prompts), dtype=np.float64)
                row[sc.name] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
            else:
                row[sc.name] = UNAVAILABLE
        rows.append(row)
    style = {}
    if baseline is not None:
        reports = {
            m.name: style_similarity_report(m, baseline, prompts, text_encoder, image_shape, baseline_steps, style_embedder,
                                            n_style_pairs, seed)
            for m in models
        }
        per_model = {name: {str(k): v for k, v in r.means.items()} for name, r in reports.items()}
        means = {str(s): float(np.mean([r.means[s] for r in reports.values()])) for s in baseline_steps}
        style = {"n_pairs": n_style_pairs, "means": means, "models": per_model}
    for model in models:
        if parameter_digest(model.predictor) != digests[model.name]:
            raise DataError(f"evaluation changed the parameters of {model.name}")
    return EvaluationReport(seed, [sc.name for sc in scorers], provenance, rows, style)


def contact_sheet(images, columns=None, scale=1, pad=1):
    """Tile images into one PIL image with ``pad`` pixels of white between tiles."""
    x = as_image_tensor(images)
    n, h, w, _ = x.shape
    columns = columns or math.ceil(math.sqrt(n))
    rows = math.ceil(n / columns)
    sheet = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        y0, x0 = pad + r * (h + pad), pad + c * (w + pad)
        sheet[y0 : y0 + h, x0 : x0 + w] = to_uint8(x[i].detach().numpy())
    img = Image.fromarray(sheet)
    if scale != 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    return img


def export_grids(images, prompts, seed, directory, scale=4):
    """Write one contact sheet per distinct prompt as ``{prompt-slug}-{seed}.png``."""
    x = as_image_tensor(images)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    groups = {}
    for i, p in enumerate(prompts):
        groups.setdefault(prompt_slug(p), []).append(i)
    paths = []
    for slug, idx in sorted(groups.items()):
        path = directory / f"{slug}-{seed}.png"
        contact_sheet(x[idx], scale=scale).save(path)
        paths.append(path)
    return paths

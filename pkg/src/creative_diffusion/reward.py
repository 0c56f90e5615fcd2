"""Style-ambiguity reward and per-prompt advantage normalization."""
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .classifiers import StyleDistribution
from .exceptions import DomainError


@dataclass(frozen=True)
class UniformTarget:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("uniform target needs at least one class")

    @property
    def probs(self):
        return np.full(self.n, 1.0 / self.n)


@dataclass
class RewardRecord:
    raw_reward: float
    normalized_advantage: float = 0.0
    prompt_key: str = ""
    classifier_id: str = ""


def _probs(dist):
    if isinstance(dist, StyleDistribution):
        return dist.probs
    return np.asarray(dist, dtype=np.float64)


def cross_entropy_to_uniform(dist):
    """``CE(p, U) = -(1/N) sum_i ln p_i``; one value per row (a float for a single vector)."""
    p = _probs(dist)
    if np.any(p <= 0) or not np.all(np.isfinite(p)):
        raise DomainError("cross entropy to uniform needs strictly positive probabilities")
    ce = -np.log(p).mean(axis=-1)
    return float(ce) if ce.ndim == 0 else ce


def torch_cross_entropy_to_uniform(probs=None, logits=None):
    """Differentiable batch mean of CE against uniform, from probabilities or logits."""
    logp = torch.log_softmax(logits, dim=-1) if logits is not None else torch.log(probs)
    return -logp.mean(dim=-1).mean()


def ambiguity_rewards(images, classifier):
    """Raw rewards ``-CE(C(x), U)`` as a float64 array, one per image."""
    return -np.atleast_1d(cross_entropy_to_uniform(classifier.classify(images)))


def style_ambiguity_reward(x0, classifier, prompts=None, classifier_id=""):
    """Reward records for each image in ``x0``; ``prompts`` supplies the prompt keys."""
    dist = classifier.classify(x0)
    if dist.n_classes < 2:
        raise DomainError("the ambiguity reward needs at least two classes")
    rewards = -np.atleast_1d(cross_entropy_to_uniform(dist))
    keys = [""] * len(rewards) if prompts is None else [getattr(p, "text", p) for p in prompts]
    return [RewardRecord(float(r), 0.0, k, classifier_id) for r, k in zip(rewards, keys)]


def reward_upper_bound(n_classes):
    return -math.log(n_classes)


class PerPromptStatTracker:
    """Running mean/std of raw rewards per prompt key.

    ``buffer_size=None`` keeps the full history; an integer keeps the most recent rewards.
    """

    def __init__(self, buffer_size=None, eps=1e-8):
        self.buffer_size = buffer_size
        self.eps = eps
        self._history = {}

    def update(self, key, rewards):
        hist = self._history.setdefault(key, [])
        hist.extend(float(r) for r in rewards)
        if self.buffer_size is not None:
            del hist[: max(0, len(hist) - self.buffer_size)]

    def stats(self, key):
        hist = np.asarray(self._history.get(key, []))
        if hist.size == 0:
            return 0.0, 0.0
        return float(hist.mean()), float(hist.std())

    def state_dict(self):
        return {"buffer_size": self.buffer_size, "history": {k: list(v) for k, v in self._history.items()}}

    def load_state_dict(self, state):
        self.buffer_size = state["buffer_size"]
        self._history = {k: list(v) for k, v in state["history"].items()}


def normalize_advantages(records, tracker):
    """Fill ``normalized_advantage`` in place after folding the batch into the running stats."""
    if not records:
        raise ValueError("normalize_advantages needs a nonempty batch")
    by_key = {}
    for rec in records:
        by_key.setdefault(rec.prompt_key, []).append(rec.raw_reward)
    for key, rewards in by_key.items():
        tracker.update(key, rewards)
    for rec in records:
        mean, std = tracker.stats(rec.prompt_key)
        rec.normalized_advantage = (rec.raw_reward - mean) / (std + tracker.eps)
    return records


class MetricsWriter:
    """Append-only JSONL writer with a schema version on every line."""

    SCHEMA_VERSION = 1

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8")

    def write(self, record):
        row = {"schema": self.SCHEMA_VERSION, **record}
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._fh.flush()

    def write_rewards(self, step, records):
        for rec in records:
            self.write(
                {
                    "kind": "reward",
                    "step": step,
                    "prompt": rec.prompt_key,
                    "raw_reward": rec.raw_reward,
                    "advantage": rec.normalized_advantage,
                    "classifier_id": rec.classifier_id,
                }
            )

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def record_to_dict(rec):
    return asdict(rec)

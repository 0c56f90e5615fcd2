"""Embedding providers for images and text.

``ToyEmbedder`` is a fixed random projection of pixel statistics so that the whole
pipeline runs without foundation-model weights. A real CLIP model plugs in by
implementing ``embed_image`` / ``embed_text`` with the same shapes.
"""
import hashlib

import numpy as np
import torch

from ._validation import as_image_tensor


class EmbeddingProvider:
    """Interface: images (batch, h, w, c) and strings to vectors in R^dim."""

    dim = None

    def embed_image(self, images):
        raise NotImplementedError

    def embed_text(self, texts):
        raise NotImplementedError


def unit_normalize(v, eps=1e-12):
    return v / torch.clamp(torch.linalg.vector_norm(v, dim=-1, keepdim=True), min=eps)


def image_statistics(x):
    """Per-channel mean, std, mean |dx|, mean |dy| and 2x2 quadrant means."""
    b, h, w, c = x.shape
    mean = x.mean(dim=(1, 2))
    std = x.std(dim=(1, 2), unbiased=False)
    dx = (x[:, :, 1:, :] - x[:, :, :-1, :]).abs().mean(dim=(1, 2)) if w > 1 else torch.zeros_like(mean)
    dy = (x[:, 1:, :, :] - x[:, :-1, :, :]).abs().mean(dim=(1, 2)) if h > 1 else torch.zeros_like(mean)
    hh, hw = max(h // 2, 1), max(w // 2, 1)
    quads = [
        x[:, :hh, :hw].mean(dim=(1, 2)),
        x[:, :hh, hw:].mean(dim=(1, 2)) if w > 1 else mean,
        x[:, hh:, :hw].mean(dim=(1, 2)) if h > 1 else mean,
        x[:, hh:, hw:].mean(dim=(1, 2)) if h > 1 and w > 1 else mean,
    ]
    return torch.cat([mean, std, dx, dy, *quads], dim=-1)


class ToyEmbedder(EmbeddingProvider):
    """Deterministic differentiable embedder: ``stats(image) @ W`` with a seeded Gaussian ``W``.

    Text is embedded as the normalized sum of per-word seeded Gaussian vectors scaled
    to the typical image-embedding norm.
    """

    def __init__(self, dim=32, channels=3, seed=0, scale=1.0):
        self.dim = dim
        self.channels = channels
        self.seed = seed
        self.scale = scale
        n_stats = 8 * channels
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((n_stats, dim)) * (scale / np.sqrt(n_stats))
        self._w = torch.as_tensor(w)

    def embed_image(self, images):
        x = images if isinstance(images, torch.Tensor) else as_image_tensor(images)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        stats = image_statistics(x)
        return stats @ self._w.to(stats.dtype)

    def word_vector(self, word):
        digest = hashlib.sha256(f"{self.seed}:{word}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.standard_normal(self.dim)

    def embed_text(self, texts):
        if isinstance(texts, str):
            texts = [texts]
        rows = []
        for text in texts:
            words = text.replace("-", " ").split() or ["<null>"]
            v = np.sum([self.word_vector(w) for w in words], axis=0)
            rows.append(v / np.linalg.norm(v) * self.scale)
        return torch.as_tensor(np.stack(rows), dtype=torch.get_default_dtype())

    def __repr__(self):
        return f"ToyEmbedder(dim={self.dim}, channels={self.channels}, seed={self.seed}, scale={self.scale})"

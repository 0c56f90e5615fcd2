"""Desk-scale noise predictors and prompt encoder.

``CrossAttentionDenoiser`` treats every pixel (or patch) as a token that attends to
prompt tokens, so low-rank adapters have cross-attention maps to attach to.
"""
import hashlib
import math

import numpy as np
import torch
from torch import nn

from .prompts import PromptSpec


def _seed_from_text(text, salt=""):
    digest = hashlib.sha256((salt + text).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class HashTextEncoder:
    """Deterministic word-hash prompt encoder producing (tokens, dim) contexts.

    The null prompt maps to a single fixed null token followed by padding.
    """

    def __init__(self, dim=16, max_tokens=4):
        self.dim = dim
        self.max_tokens = max_tokens

    def word_vector(self, word):
        rng = np.random.default_rng(_seed_from_text(word, "word:"))
        return rng.standard_normal(self.dim) / math.sqrt(self.dim)

    def encode_one(self, prompt):
        text = prompt.text if isinstance(prompt, PromptSpec) else str(prompt)
        out = np.zeros((self.max_tokens, self.dim))
        words = text.split() or ["<null>"]
        for i, w in enumerate(words[: self.max_tokens]):
            out[i] = self.word_vector(w)
        return out

    def __call__(self, prompts, dtype=None):
        arr = np.stack([self.encode_one(p) for p in prompts])
        return torch.as_tensor(arr, dtype=dtype or torch.get_default_dtype())


def timestep_embedding(t, dim, max_period=1000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(torch.get_default_dtype())


class CrossAttention(nn.Module):
    """Single-head attention from image tokens (queries) to context tokens."""

    def __init__(self, dim, context_dim, head_dim=None):
        super().__init__()
        head_dim = head_dim or dim
        self.to_q = nn.Linear(dim, head_dim, bias=False)
        self.to_k = nn.Linear(context_dim, head_dim, bias=False)
        self.to_v = nn.Linear(context_dim, head_dim, bias=False)
        self.to_out = nn.Linear(head_dim, dim)
        self.scale = head_dim**-0.5

    def forward(self, x, context):
        q = self.to_q(x)
        k = self.to_k(context)
        v = self.to_v(context)
        attn = torch.softmax(torch.einsum("bnd,bmd->bnm", q, k) * self.scale, dim=-1)
        return self.to_out(torch.einsum("bnm,bmd->bnd", attn, v))


class CrossAttentionDenoiser(nn.Module):
    """Tokenized epsilon-predictor: token MLP, cross-attention, token mixing, readout."""

    def __init__(self, image_shape=(8, 8, 3), hidden=64, context_dim=16, patch=1, time_dim=32, max_period=1000.0):
        super().__init__()
        self.init_args = {"image_shape": tuple(image_shape), "hidden": hidden, "context_dim": context_dim, "patch": patch,
                          "time_dim": time_dim, "max_period": max_period}
        h, w, c = image_shape
        if h % patch or w % patch:
            raise ValueError("patch must divide the image size")
        self.image_shape = tuple(image_shape)
        self.patch = patch
        self.n_tokens = (h // patch) * (w // patch)
        token_in = patch * patch * c
        self.time_dim = time_dim
        self.max_period = max_period
        self.embed = nn.Linear(token_in, hidden)
        self.pos = nn.Parameter(torch.randn(self.n_tokens, hidden) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = CrossAttention(hidden, context_dim)
        self.norm2 = nn.LayerNorm(hidden)
        self.mix = nn.Linear(self.n_tokens, self.n_tokens)
        self.norm3 = nn.LayerNorm(hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden, 2 * hidden), nn.SiLU(), nn.Linear(2 * hidden, hidden))
        self.out = nn.Linear(hidden, token_in)
        self.null_context = nn.Parameter(torch.zeros(1, 1, context_dim), requires_grad=False)

    def _tokens(self, x):
        b, h, w, c = x.shape
        p = self.patch
        x = x.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, self.n_tokens, p * p * c)

    def _untokens(self, tok):
        b = tok.shape[0]
        h, w, c = self.image_shape
        p = self.patch
        x = tok.reshape(b, h // p, w // p, p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, h, w, c)

    def forward(self, x_t, t, context=None):
        if tuple(x_t.shape[1:]) != self.image_shape:
            raise ValueError(f"expected images {self.image_shape}, got {tuple(x_t.shape[1:])}")
        if context is None:
            context = self.null_context.expand(x_t.shape[0], -1, -1)
        temb = self.time_mlp(timestep_embedding(t, self.time_dim, self.max_period))
        h = self.embed(self._tokens(x_t)) + self.pos + temb[:, None, :]
        h = h + self.attn(self.norm1(h), context)
        h = h + self.mix(self.norm2(h).transpose(1, 2)).transpose(1, 2)
        h = h + self.mlp(self.norm3(h))
        return self._untokens(self.out(h))


class GaussianMixtureDenoiser(nn.Module):
    """Epsilon-predictor exact for data drawn elementwise from a learnable Gaussian mixture.

    For mixture weights ``w_k``, means ``m_k`` and stds ``s_k``, the noisy marginal at
    step ``t`` is a mixture with means ``sqrt(abar) m_k`` and variances ``abar s_k^2 + 1 - abar``;
    the returned value is the posterior mean of the injected noise given ``x_t``.
    """

    def __init__(self, schedule, n_components=2, init_means=None):
        super().__init__()
        self.register_buffer("alpha_bar_by_timestep", self._abar_table(schedule))
        if init_means is None:
            init_means = torch.linspace(-1.0, 1.0, n_components)
        self.logits = nn.Parameter(torch.zeros(n_components))
        self.means = nn.Parameter(torch.as_tensor(init_means, dtype=torch.get_default_dtype()).clone())
        self.log_stds = nn.Parameter(torch.full((n_components,), math.log(0.5)))

    @staticmethod
    def _abar_table(schedule):
        table = torch.ones(int(schedule.timesteps.max()) + 1, dtype=torch.get_default_dtype())
        table[torch.tensor(schedule.timesteps.tolist())] = torch.as_tensor(schedule.alpha_bar, dtype=table.dtype)
        return table

    def forward(self, x_t, t, context=None):
        abar = self.alpha_bar_by_timestep[t].reshape(-1, *([1] * (x_t.ndim - 1)))[..., None]
        x = x_t[..., None]
        m = torch.sqrt(abar) * self.means
        var = abar * torch.exp(2 * self.log_stds) + 1.0 - abar
        logw = torch.log_softmax(self.logits, dim=0) - 0.5 * torch.log(var) - (x - m) ** 2 / (2 * var)
        resp = torch.softmax(logw, dim=-1)
        eps = torch.sqrt(1.0 - abar) * (x - m) / var
        return (resp * eps).sum(dim=-1)


def parameter_checksum(module, trainable_only=False):
    """Float64 sum of absolute parameter values plus element count, for freeze checks."""
    total = 0.0
    count = 0
    for p in module.parameters():
        if trainable_only and not p.requires_grad:
            continue
        total += float(p.detach().to(torch.float64).abs().sum())
        count += p.numel()
    return total, count


def parameter_digest(module):
    """SHA-256 over the raw bytes of the state dict, in key order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


DENOISER_FORMAT_VERSION = 1


def save_denoiser(model, path, extra=None):
    """Write a :class:`CrossAttentionDenoiser` with its constructor arguments.

    Adapters, if attached, are not part of this file; see :mod:`creative_diffusion.lora`.
    """
    state = {k.replace(".base.", "."): v for k, v in model.state_dict().items() if not k.endswith(("lora_A", "lora_B"))}
    torch.save({"version": DENOISER_FORMAT_VERSION, "init": model.init_args, "state": state, "extra": extra or {}}, path)


def load_denoiser(path):
    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("version") != DENOISER_FORMAT_VERSION:
        raise ValueError(f"unsupported denoiser checkpoint version {ckpt.get('version')}")
    model = CrossAttentionDenoiser(**ckpt["init"])
    model.load_state_dict(ckpt["state"])
    return model, ckpt["extra"]

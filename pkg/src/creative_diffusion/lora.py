"""Low-rank adapters for the cross-attention projections of a denoiser."""
import math

import torch
from torch import nn

from .exceptions import ConfigError, DataError
from .models import CrossAttention

ADAPTER_FORMAT_VERSION = 1
CROSS_ATTENTION_MAPS = ("to_q", "to_k", "to_v", "to_out")


class LoRALinear(nn.Module):
    """``base(x) + (alpha / rank) * x A^T B^T`` with ``B`` zero-initialized.

    The wrapped layer is frozen, so at construction the adapted layer computes
    exactly what the base layer did.
    """

    def __init__(self, base, rank=4, alpha=4.0):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {rank}")
        self.base = base
        self.rank = rank
        self.alpha = alpha
        self.scaling = alpha / rank
        for p in self.base.parameters():
            p.requires_grad_(False)
        dtype = base.weight.dtype
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features, dtype=dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    def forward(self, x):
        return self.base(x) + (x @ self.lora_A.T @ self.lora_B.T) * self.scaling

    def merged_weight(self):
        return self.base.weight + self.scaling * self.lora_B @ self.lora_A


def attach_lora(model, rank=4, alpha=4.0, targets=CROSS_ATTENTION_MAPS):
    """Wrap every ``targets`` projection of every :class:`CrossAttention` in ``model``.

    All other parameters are frozen. Returns the list of adapter module names.
    """
    for p in model.parameters():
        p.requires_grad_(False)
    names = []
    for mod_name, module in model.named_modules():
        if not isinstance(module, CrossAttention):
            continue
        for target in targets:
            layer = getattr(module, target)
            if isinstance(layer, LoRALinear):
                raise ConfigError(f"{mod_name}.{target} already carries an adapter")
            setattr(module, target, LoRALinear(layer, rank, alpha))
            names.append(f"{mod_name}.{target}" if mod_name else target)
    if not names:
        raise ConfigError("model has no cross-attention layers to adapt")
    return names


def adapter_parameters(model):
    return [p for n, p in model.named_parameters() if n.endswith(("lora_A", "lora_B"))]


def count_adapter_parameters(model):
    return sum(p.numel() for p in adapter_parameters(model))


def adapter_state_dict(model):
    return {n: t.detach().clone() for n, t in model.state_dict().items() if n.endswith(("lora_A", "lora_B"))}


def _adapter_meta(model):
    for module in model.modules():
        if isinstance(module, LoRALinear):
            return {"rank": module.rank, "alpha": module.alpha}
    raise ConfigError("model carries no adapters")


def save_adapters(model, path, extra=None):
    """Write only the adapter factors, with rank and alpha, to ``path``."""
    torch.save(
        {"version": ADAPTER_FORMAT_VERSION, **_adapter_meta(model), "state": adapter_state_dict(model), "extra": extra or {}},
        path,
    )


def load_adapters(model, path):
    """Load adapter factors into ``model``, attaching adapters first if it has none."""
    ckpt = torch.load(path, weights_only=False)
    if ckpt.get("version") != ADAPTER_FORMAT_VERSION:
        raise DataError(f"unsupported adapter checkpoint version {ckpt.get('version')}")
    if not any(isinstance(m, LoRALinear) for m in model.modules()):
        attach_lora(model, ckpt["rank"], ckpt["alpha"])
    meta = _adapter_meta(model)
    if meta["rank"] != ckpt["rank"]:
        raise ConfigError(f"checkpoint rank {ckpt['rank']} does not match model rank {meta['rank']}")
    expected = set(adapter_state_dict(model))
    if set(ckpt["state"]) != expected:
        raise DataError("adapter checkpoint does not match the model's adapter layout")
    model.load_state_dict(ckpt["state"], strict=False)
    return ckpt["extra"]

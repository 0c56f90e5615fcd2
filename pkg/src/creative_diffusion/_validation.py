"""Input validation helpers shared by the estimators."""
import numpy as np
import torch

from .exceptions import DomainError, ShapeError


def as_image_tensor(X, dtype=None):
    """Return ``X`` as a float tensor of shape (batch, height, width, channels).

    Accepts numpy arrays or tensors; a single image is promoted to a batch of one.
    """
    if isinstance(X, torch.Tensor):
        x = X
    else:
        x = torch.as_tensor(np.asarray(X))
    if not torch.is_floating_point(x):
        x = x.to(torch.get_default_dtype())
    if dtype is not None:
        x = x.to(dtype)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ShapeError(f"expected images shaped (batch, h, w, c), got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise DomainError("images contain non-finite values")
    return x


def check_same_shape(a, b, what="arrays"):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


def check_positive(value, name):
    if not value > 0:
        raise DomainError(f"{name} must be positive, got {value}")
    return value


def as_rng(random_state):
    """Normalize ``random_state`` (None, int or Generator) to a numpy Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def torch_generator(seed):
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g

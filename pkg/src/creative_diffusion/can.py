"""Creative Adversarial Network: DCGAN-style generator and two-headed discriminator.

The discriminator learns real/fake plus style classification; the generator is
trained to fool it while making its samples style-ambiguous. Losses follow the
non-saturating formulation:

    L_disc = -E[log D(x)] - E[log(1 - D(G(z)))] + L_SL
    L_gen  = -E[log D(G(z))] + L_SA
"""
import copy
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import as_image_tensor, torch_generator
from .exceptions import ConfigError, DomainError, NumericError, ShapeError
from .prompts import STYLES
from .reward import torch_cross_entropy_to_uniform

IMAGE_DIMS = (8, 16, 32, 64, 128, 256, 512)
CHECKPOINT_VERSION = 1


def _n_doublings(image_dim):
    if image_dim not in IMAGE_DIMS:
        raise ConfigError(f"image_dim must be one of {IMAGE_DIMS}, got {image_dim}")
    return int(math.log2(image_dim)) - 2


@dataclass
class GeneratorSpec:
    """Noise -> 4x4xC projection, halving-channel x2 upscales, final 3-channel tanh layer.

    The number of intermediate upscales is ``log2(image_dim) - 3`` (3, 4, 5, 6 for
    64, 128, 256, 512). ``width_divisor`` shrinks every channel count.
    """

    noise_dim: int = 100
    image_dim: int = 64
    base_channels: int = 2048
    width_divisor: int = 1
    leaky_slope: float = 0.2

    def channels(self):
        c0 = self.base_channels // self.width_divisor
        n_up = _n_doublings(self.image_dim) - 1
        chans = [c0 // 2**i for i in range(n_up + 1)]
        if chans[-1] < 1:
            raise ConfigError("generator channels vanish; reduce width_divisor")
        return chans


@dataclass
class DiscriminatorSpec:
    """Conv stem (3 -> stem_channels, /2), doubling stages, two constant stages, two heads.

    The number of doubling stages is ``log2(image_dim) - 4`` (2, 3, 4, 5 for
    64, 128, 256, 512).
    """

    image_dim: int = 64
    stem_channels: int = 32
    head_widths: tuple = (1024, 512)
    n_styles: int = 27
    dropout: float = 0.5
    leaky_slope: float = 0.2

    def n_doubling(self):
        n = _n_doublings(self.image_dim) - 2
        if n < 0:
            raise ConfigError("discriminator needs image_dim >= 16")
        return n

    def feature_shape(self):
        c = self.stem_channels * 2 ** self.n_doubling()
        side = self.image_dim // 2 ** (1 + self.n_doubling() + 2)
        return c, max(side, 1)


def desk_specs(image_dim=64, n_styles=27):
    """The reduced-width profile used for CPU runs."""
    return (
        GeneratorSpec(image_dim=image_dim, width_divisor=64),
        DiscriminatorSpec(image_dim=image_dim, stem_channels=8, head_widths=(64, 32), n_styles=n_styles),
    )


class Generator(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        chans = spec.channels()
        layers = [
            nn.ConvTranspose2d(spec.noise_dim, chans[0], 4, 1, 0, bias=False),
            nn.BatchNorm2d(chans[0]),
            nn.LeakyReLU(spec.leaky_slope),
        ]
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=False), nn.BatchNorm2d(cout), nn.LeakyReLU(spec.leaky_slope)]
        layers += [nn.ConvTranspose2d(chans[-1], 3, 4, 2, 1, bias=False), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        if z.ndim != 2 or z.shape[1] != self.spec.noise_dim:
            raise ShapeError(f"expected noise of shape (batch, {self.spec.noise_dim}), got {tuple(z.shape)}")
        out = self.net(z[:, :, None, None])
        return out.permute(0, 2, 3, 1)


class Discriminator(nn.Module):
    """Returns ``(real/fake logit, style logits)`` for channel-last images."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        slope = spec.leaky_slope
        c = spec.stem_channels
        layers = [nn.Conv2d(3, c, 4, 2, 1), nn.LeakyReLU(slope)]
        for _ in range(spec.n_doubling()):
            layers += [nn.Conv2d(c, 2 * c, 4, 2, 1), nn.BatchNorm2d(2 * c), nn.LeakyReLU(slope)]
            c *= 2
        for _ in range(2):
            layers += [nn.Conv2d(c, c, 4, 2, 1), nn.BatchNorm2d(c), nn.LeakyReLU(slope)]
        layers.append(nn.Flatten())
        self.trunk = nn.Sequential(*layers)
        c, side = spec.feature_shape()
        n_feat = c * side * side
        self.binary_head = nn.Linear(n_feat, 1)
        w1, w2 = spec.head_widths
        self.style_head = nn.Sequential(
            nn.Linear(n_feat, w1),
            nn.LeakyReLU(slope),
            nn.Dropout(spec.dropout),
            nn.Linear(w1, w2),
            nn.LeakyReLU(slope),
            nn.Dropout(spec.dropout),
            nn.Linear(w2, spec.n_styles),
        )

    def features(self, x):
        dim = self.spec.image_dim
        if x.ndim != 4 or tuple(x.shape[1:]) != (dim, dim, 3):
            raise ShapeError(f"expected images (batch, {dim}, {dim}, 3), got {tuple(x.shape)}")
        return self.trunk(x.permute(0, 3, 1, 2))

    def forward(self, x):
        h = self.features(x)
        return self.binary_head(h).squeeze(-1), self.style_head(h)


class StyleHead(nn.Module):
    """Discriminator trunk plus style head, loadable without the rest of the CAN."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        disc = Discriminator(spec)
        self.trunk = disc.trunk
        self.style_head = disc.style_head

    @property
    def image_dim(self):
        return self.spec.image_dim

    @property
    def n_styles(self):
        return self.spec.n_styles

    @classmethod
    def from_discriminator(cls, disc):
        head = cls(disc.spec)
        head.trunk.load_state_dict(disc.trunk.state_dict())
        head.style_head.load_state_dict(disc.style_head.state_dict())
        return head

    def forward(self, x):
        dim = self.spec.image_dim
        if x.ndim != 4 or tuple(x.shape[1:]) != (dim, dim, 3):
            raise ShapeError(f"expected images (batch, {dim}, {dim}, 3), got {tuple(x.shape)}")
        return self.style_head(self.trunk(x.permute(0, 3, 1, 2)))

    def save(self, path, class_names=STYLES):
        torch.save(
            {"version": CHECKPOINT_VERSION, "spec": asdict(self.spec), "state": self.state_dict(), "class_names": list(class_names)},
            path,
        )

    @classmethod
    def load(cls, path):
        ckpt = torch.load(path, weights_only=False)
        spec = DiscriminatorSpec(**{**ckpt["spec"], "head_widths": tuple(ckpt["spec"]["head_widths"])})
        head = cls(spec)
        head.load_state_dict(ckpt["state"])
        head.eval()
        return head, ckpt["class_names"]


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def adversarial_discriminator_loss(real_logits, fake_logits):
    """``-E[log D(x)] - E[log(1 - D(G(z)))]`` from logits."""
    return F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits)) + F.binary_cross_entropy_with_logits(
        fake_logits, torch.zeros_like(fake_logits)
    )


def adversarial_generator_loss(fake_logits):
    """``-E[log D(G(z))]`` (non-saturating)."""
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def style_classification_loss(style_logits, labels):
    """Mean cross entropy of softmaxed style logits against integer labels."""
    labels = torch.as_tensor(labels, dtype=torch.int64)
    n = style_logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise DomainError(f"style labels must lie in [0, {n})")
    return F.cross_entropy(style_logits, labels)


def style_ambiguity_loss(style_logits=None, probs=None):
    """``E[CE(C(G(z)), U)]``; bounded below by ``ln N``."""
    return torch_cross_entropy_to_uniform(probs=probs, logits=style_logits)


@dataclass
class LossReport:
    step: int
    d_loss: float
    d_adversarial: float
    style_classification: float
    g_loss: float
    g_adversarial: float
    style_ambiguity: float
    style_accuracy: float = float("nan")

    def as_dict(self):
        return asdict(self)


def can_train_step(images, labels, generator, discriminator, d_opt, g_opt, rng, ambiguity_classifier=None,
                   use_style_losses=True, step=0):
    """One discriminator update followed by one generator update.

    ``ambiguity_classifier`` (anything with ``torch_proba``) replaces the
    discriminator style head in the ambiguity loss when given.
    """
    batch = images.shape[0]
    z = torch.randn((batch, generator.spec.noise_dim), generator=rng)
    n_styles = discriminator.spec.n_styles

    d_opt.zero_grad(set_to_none=True)
    fake = generator(z).detach()
    real_logit, real_style = discriminator(images)
    fake_logit, _ = discriminator(fake)
    d_adv = adversarial_discriminator_loss(real_logit, fake_logit)
    l_sl = style_classification_loss(real_style, labels) if use_style_losses else torch.zeros(())
    d_loss = d_adv + l_sl
    _check_finite(d_loss, "discriminator", step)
    d_loss.backward()
    d_opt.step()

    g_opt.zero_grad(set_to_none=True)
    fake = generator(z)
    fake_logit, fake_style = discriminator(fake)
    g_adv = adversarial_generator_loss(fake_logit)
    if not use_style_losses:
        l_sa = torch.zeros(())
    elif ambiguity_classifier is not None:
        l_sa = style_ambiguity_loss(probs=ambiguity_classifier.torch_proba(fake))
    else:
        l_sa = style_ambiguity_loss(style_logits=fake_style)
    g_loss = g_adv + l_sa
    _check_finite(g_loss, "generator", step)
    g_loss.backward()
    g_opt.step()

    with torch.no_grad():
        acc = (real_style.argmax(-1) == torch.as_tensor(labels)).double().mean().item()
    report = LossReport(step, d_loss.item(), d_adv.item(), l_sl.item(), g_loss.item(), g_adv.item(), l_sa.item(), acc)
    if use_style_losses and ambiguity_classifier is None and report.style_ambiguity < math.log(n_styles) - 1e-6:
        raise NumericError("style ambiguity loss fell below ln N", step=step)
    return report


def _check_finite(loss, which, step):
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite {which} loss", step=step)


def _adam(params, lr, betas, eps, weight_decay):
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)


class CreativeAdversarialNetwork(BaseEstimator):
    """Estimator wrapper around CAN training.

    ``fit(X, y)`` takes channel-last images in [-1, 1] and integer style labels.
    ``width_divisor`` and ``stem_channels``/``head_widths`` select the model width;
    the defaults are the full-size architecture.
    """

    def __init__(
        self,
        image_dim=64,
        noise_dim=100,
        n_styles=27,
        width_divisor=1,
        stem_channels=32,
        head_widths=(1024, 512),
        dropout=0.5,
        leaky_slope=0.2,
        epochs=100,
        batch_size=32,
        lr=1e-3,
        betas=(0.9, 0.99),
        eps=1e-8,
        weight_decay=0.0,
        use_style_losses=True,
        ambiguity_classifier=None,
        wasserstein_lambda=None,
        class_names=STYLES,
        random_state=0,
        callback=None,
    ):
        self.image_dim = image_dim
        self.noise_dim = noise_dim
        self.n_styles = n_styles
        self.width_divisor = width_divisor
        self.stem_channels = stem_channels
        self.head_widths = head_widths
        self.dropout = dropout
        self.leaky_slope = leaky_slope
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.use_style_losses = use_style_losses
        self.ambiguity_classifier = ambiguity_classifier
        self.wasserstein_lambda = wasserstein_lambda
        self.class_names = class_names
        self.random_state = random_state
        self.callback = callback

    def _specs(self):
        g = GeneratorSpec(self.noise_dim, self.image_dim, 2048, self.width_divisor, self.leaky_slope)
        d = DiscriminatorSpec(self.image_dim, self.stem_channels, tuple(self.head_widths), self.n_styles, self.dropout, self.leaky_slope)
        return g, d

    def _build(self):
        if self.wasserstein_lambda is not None:
            raise ConfigError("the Wasserstein gradient-penalty variant is not supported; leave wasserstein_lambda unset")
        if len(self.class_names) != self.n_styles:
            raise ConfigError(f"{len(self.class_names)} class names for {self.n_styles} style logits")
        torch.manual_seed(self.random_state)
        g_spec, d_spec = self._specs()
        self.generator_ = Generator(g_spec)
        self.discriminator_ = Discriminator(d_spec)
        self.g_opt_ = _adam(self.generator_.parameters(), self.lr, self.betas, self.eps, self.weight_decay)
        self.d_opt_ = _adam(self.discriminator_.parameters(), self.lr, self.betas, self.eps, self.weight_decay)
        self.rng_ = torch_generator(self.random_state)
        self.history_ = []
        self.epoch_history_ = []
        self.step_ = 0

    def fit(self, X, y):
        self._build()
        return self.partial_fit(X, y, epochs=self.epochs)

    def partial_fit(self, X, y, epochs=1):
        if not hasattr(self, "generator_"):
            self._build()
        x = as_image_tensor(X, dtype=torch.get_default_dtype())
        labels = torch.as_tensor(np.asarray(y), dtype=torch.int64)
        if x.shape[0] != labels.shape[0]:
            raise ShapeError("X and y differ in length")
        if tuple(x.shape[1:]) != (self.image_dim, self.image_dim, 3):
            raise ShapeError(f"expected {self.image_dim}x{self.image_dim}x3 images, got {tuple(x.shape[1:])}")
        n = x.shape[0]
        self.generator_.train()
        self.discriminator_.train()
        for _ in range(epochs):
            # Dropout draws from the global generator; reseed it per epoch so resumed runs match.
            torch.manual_seed(self.random_state * 100_003 + len(self.epoch_history_))
            perm = torch.randperm(n, generator=self.rng_)
            reports = []
            for start in range(0, n, self.batch_size):
                idx = perm[start : start + self.batch_size]
                if idx.numel() < 2:
                    continue
                rep = can_train_step(
                    x[idx], labels[idx], self.generator_, self.discriminator_, self.d_opt_, self.g_opt_, self.rng_,
                    self.ambiguity_classifier, self.use_style_losses, self.step_,
                )
                self.step_ += 1
                reports.append(rep)
                self.history_.append(rep)
            summary = {k: float(np.mean([getattr(r, k) for r in reports])) for k in LossReport.__dataclass_fields__ if k != "step"}
            summary["epoch"] = len(self.epoch_history_)
            self.epoch_history_.append(summary)
            if self.callback is not None:
                self.callback(self, summary)
        return self

    @torch.no_grad()
    def sample(self, n, seed=None):
        check_is_fitted(self, "generator_")
        g = torch_generator(self.random_state if seed is None else seed)
        self.generator_.eval()
        z = torch.randn((n, self.noise_dim), generator=g)
        out = self.generator_(z)
        self.generator_.train()
        return out

    @torch.no_grad()
    def style_logits(self, X):
        check_is_fitted(self, "discriminator_")
        self.discriminator_.eval()
        _, logits = self.discriminator_(as_image_tensor(X, dtype=torch.get_default_dtype()))
        self.discriminator_.train()
        return logits

    def style_accuracy(self, X, y):
        pred = self.style_logits(X).argmax(-1).numpy()
        return float((pred == np.asarray(y)).mean())

    def style_head(self):
        """A frozen standalone copy of the discriminator's style head."""
        check_is_fitted(self, "discriminator_")
        head = StyleHead.from_discriminator(copy.deepcopy(self.discriminator_))
        head.eval()
        return head

    def save(self, path):
        check_is_fitted(self, "generator_")
        g_spec, d_spec = self._specs()
        torch.save(
            {
                "version": CHECKPOINT_VERSION,
                "params": {k: v for k, v in self.get_params().items() if k not in ("ambiguity_classifier", "callback")},
                "generator_spec": asdict(g_spec),
                "discriminator_spec": asdict(d_spec),
                "generator": self.generator_.state_dict(),
                "discriminator": self.discriminator_.state_dict(),
                "g_opt": self.g_opt_.state_dict(),
                "d_opt": self.d_opt_.state_dict(),
                "class_names": list(self.class_names),
                "epoch_history": self.epoch_history_,
                "step": self.step_,
                "rng_state": self.rng_.get_state(),
            },
            path,
        )

    @classmethod
    def load(cls, path):
        ckpt = torch.load(path, weights_only=False)
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported CAN checkpoint version {ckpt.get('version')}")
        params = dict(ckpt["params"])
        params["class_names"] = tuple(ckpt["class_names"])
        est = cls(**params)
        est._build()
        est.generator_.load_state_dict(ckpt["generator"])
        est.discriminator_.load_state_dict(ckpt["discriminator"])
        est.g_opt_.load_state_dict(ckpt["g_opt"])
        est.d_opt_.load_state_dict(ckpt["d_opt"])
        est.epoch_history_ = ckpt["epoch_history"]
        est.step_ = ckpt["step"]
        est.rng_.set_state(ckpt["rng_state"])
        return est

"""Class-balanced datasets, the synthetic styled-shapes corpus and image folder ingestion."""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import as_rng
from .exceptions import DataError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass
class BalancedDataset:
    """Equal-sized per-class sample lists."""

    classes: dict
    n_per_class: int
    mode: str = "oversample"

    def __post_init__(self):
        for name, items in self.classes.items():
            if len(items) != self.n_per_class:
                raise DataError(
                    f"class {name!r} has {len(items)} samples, expected {self.n_per_class}"
                )

    def counts(self):
        return {name: len(items) for name, items in self.classes.items()}

    def items(self):
        """Flatten to ``(sample, label)`` pairs with labels in class insertion order."""
        out = []
        for label, items in enumerate(self.classes.values()):
            out.extend((item, label) for item in items)
        return out


def balance_classes(raw, n_per_class=1000, rng=None):
    """Resample every class of ``raw`` (mapping class -> samples) to ``n_per_class``.

    Larger classes are subsampled without replacement. A class of ``m < n`` samples
    repeats each sample ``n // m`` times and fills the remainder with distinct samples
    drawn uniformly at random, so every original sample appears at least once.
    """
    rng = as_rng(rng)
    if n_per_class < 1:
        raise DataError("n_per_class must be at least 1")
    balanced = {}
    for name, samples in raw.items():
        samples = list(samples)
        m = len(samples)
        if m == 0:
            raise DataError(f"class {name!r} is empty")
        if m >= n_per_class:
            idx = rng.choice(m, size=n_per_class, replace=False)
        else:
            reps, rest = divmod(n_per_class, m)
            idx = np.concatenate([np.tile(np.arange(m), reps), rng.choice(m, size=rest, replace=False)])
            rng.shuffle(idx)
        balanced[name] = [samples[i] for i in idx]
    return BalancedDataset(balanced, n_per_class)


# Per-style texture parameters for the synthetic corpus: (stripe angle, frequency, base colour).
_PALETTE = np.array(
    [
        [0.9, 0.3, 0.1],
        [0.1, 0.4, 0.9],
        [0.2, 0.8, 0.3],
        [0.8, 0.7, 0.1],
        [0.6, 0.2, 0.7],
        [0.1, 0.8, 0.8],
    ]
)


def _style_params(style, n_styles):
    angle = np.pi * style / max(n_styles, 1)
    freq = 1.0 + 1.5 * (style % 3)
    if style < len(_PALETTE):
        colour = _PALETTE[style]
    else:
        colour = np.random.default_rng(1000 + style).uniform(0.1, 0.9, size=3)
    return angle, freq, colour


def render_styled_shape(style, n_styles, size, rng):
    """Draw one image of a pseudo-style: oriented stripes in the style's palette plus a shape."""
    angle, freq, colour = _style_params(style, n_styles)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    phase = rng.uniform(0, 2 * np.pi)
    jitter = rng.normal(0, 0.08)
    wave = np.sin(2 * np.pi * freq * (np.cos(angle + jitter) * xx + np.sin(angle + jitter) * yy) + phase)
    base = colour + rng.normal(0, 0.05, size=3)
    img = base[None, None, :] * (0.75 + 0.25 * wave[..., None])
    # Shape placement: a disc for even styles, a square for odd ones.
    cy, cx = rng.uniform(0.25, 0.75, size=2)
    r = rng.uniform(0.12, 0.22)
    if style % 2 == 0:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
    else:
        mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
    img[mask] = 1.0 - base
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(2.0 * img - 1.0, -1.0, 1.0)


def make_styled_shapes(n_per_style, size=8, n_styles=2, rng=None):
    """Synthetic labelled corpus standing in for WikiArt at desk scale.

    Returns ``(images, labels)`` with images shaped (n, size, size, 3) in [-1, 1].
    """
    rng = as_rng(rng)
    images, labels = [], []
    for style in range(n_styles):
        for _ in range(n_per_style):
            images.append(render_styled_shape(style, n_styles, size, rng))
            labels.append(style)
    return np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64)


@dataclass
class ImageManifest:
    """One ``(path, class index)`` record per image."""

    records: list = field(default_factory=list)
    class_names: list = field(default_factory=list)

    def write(self, path):
        path = Path(path)
        lines = ["# classes\t" + "\t".join(self.class_names)]
        lines += [f"{p}\t{c}" for p, c in self.records]
        path.write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path):
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith("# classes"):
            raise DataError(f"{path} is not an image manifest")
        names = lines[0].split("\t")[1:]
        records = []
        for line in lines[1:]:
            if line.strip():
                p, c = line.rsplit("\t", 1)
                records.append((p, int(c)))
        return cls(records, names)

    def by_class(self):
        out = {name: [] for name in self.class_names}
        for p, c in self.records:
            out[self.class_names[c]].append(p)
        return out


def scan_image_folder(root, class_names=None):
    """Build a manifest from a directory-per-class layout (e.g. a WikiArt dump).

    ``class_names`` fixes the label order; by default the sorted subdirectory names.
    """
    root = Path(root)
    if class_names is None:
        class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    records = []
    for idx, name in enumerate(class_names):
        folder = root / name
        if not folder.is_dir():
            raise DataError(f"missing class directory {folder}")
        files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"class {name!r} has no images")
        records.extend((str(p), idx) for p in files)
    return ImageManifest(records, list(class_names))


def load_image(path, size):
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BICUBIC)
        arr = np.asarray(im, dtype=np.float32)
    return arr / 127.5 - 1.0


def to_uint8(images):
    """Map [-1, 1] images to uint8 pixels."""
    arr = np.asarray(images, dtype=np.float64)
    return np.round((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)

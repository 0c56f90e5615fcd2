"""Experiment configuration: YAML in, validated dataclasses out.

Every field has a default; a file only states what it changes. Validation
collects every problem before raising so that one run reports all of them.
"""
import hashlib
import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from importlib import resources
from pathlib import Path

import yaml

from .exceptions import ConfigError
from .prompts import MEDIUMS, SUBJECTS

MODES = ("ddpo", "can", "evaluate")
CLASSIFIERS = ("clip", "kmeans_text", "kmeans_image", "dcgan")
IMAGE_DIMS = (8, 16, 32, 64, 128, 256, 512)
VARIANCES = ("posterior", "beta")
OUTPUT_ROOT_ENV = "CREATIVE_DIFFUSION_OUTPUT_ROOT"


@dataclass
class ScheduleSection:
    train_steps: int = 1000
    inference_steps: int = 30
    variance: str = "posterior"


@dataclass
class DataSection:
    """Synthetic styled-shape corpus unless ``image_root`` names a directory-per-class tree."""

    image_root: str | None = None
    n_per_style: int = 256
    n_styles: int = 2
    n_per_class: int | None = None


@dataclass
class ModelSection:
    hidden: int = 32
    context_dim: int = 16
    patch: int = 1
    checkpoint: str | None = None
    pretrain_steps: int = 2000
    pretrain_batch: int = 64
    pretrain_lr: float = 2e-3


@dataclass
class RewardSection:
    k: int = 10
    temperature: float = 0.01
    epsilon: float = 1e-8
    embed_dim: int = 32
    embed_scale: float = 1.0
    centers: str | None = None
    head_checkpoint: str | None = None


@dataclass
class PromptSection:
    mediums: list = field(default_factory=lambda: list(MEDIUMS))
    subjects: list = field(default_factory=lambda: list(SUBJECTS))
    null_probability: float = 0.1


@dataclass
class TrainerSection:
    epochs: int = 50
    batches_per_epoch: int = 32
    batch_size: int = 8
    grad_accum_steps: int = 1
    inner_epochs: int = 1
    clip_epsilon: float = 1e-4
    lr: float = 3e-4
    betas: list = field(default_factory=lambda: [0.9, 0.99])
    weight_decay: float = 1e-4
    adam_eps: float = 1e-8
    max_grad_norm: float | None = None
    lora_rank: int = 4
    lora_alpha: float = 4.0


@dataclass
class CanSection:
    epochs: int = 100
    batch_size: int = 32
    n_styles: int = 27
    width_divisor: int = 1
    stem_channels: int = 32
    head_widths: list = field(default_factory=lambda: [1024, 512])
    dropout: float = 0.5
    lr: float = 1e-3
    betas: list = field(default_factory=lambda: [0.9, 0.99])
    use_style_losses: bool = True
    wasserstein_lambda: float | None = None


@dataclass
class EvaluateSection:
    base_checkpoint: str | None = None
    adapters: dict = field(default_factory=dict)
    n_prompts: int = 100
    baseline_steps: list = field(default_factory=lambda: [30, 15, 10])
    n_style_pairs: int = 40
    scorers: list = field(default_factory=lambda: ["ava", "ambiguity_reward", "prompt_similarity", "image_reward"])
    image_reward_weights: str | None = None


@dataclass
class GridSection:
    images_per_prompt: int = 4
    scale: int = 4


@dataclass
class ExperimentConfig:
    mode: str = "ddpo"
    classifier: str = "kmeans_image"
    image_dim: int = 8
    seed: int = 0
    output_dir: str = "runs/experiment"
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    reward: RewardSection = field(default_factory=RewardSection)
    prompts: PromptSection = field(default_factory=PromptSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    can: CanSection = field(default_factory=CanSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    grid: GridSection = field(default_factory=GridSection)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        """SHA-256 of the canonical JSON form; the output directory is excluded."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def resolved_output_dir(self):
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def validate(self, check_paths=True):
        errors = []

        def need(cond, msg):
            if not cond:
                errors.append(msg)

        need(self.mode in MODES, f"mode: must be one of {MODES}, got {self.mode!r}")
        need(self.classifier in CLASSIFIERS, f"classifier: must be one of {CLASSIFIERS}, got {self.classifier!r}")
        need(self.image_dim in IMAGE_DIMS, f"image_dim: must be one of {IMAGE_DIMS}, got {self.image_dim!r}")
        need(isinstance(self.seed, int) and self.seed >= 0, "seed: must be a nonnegative integer")
        s = self.schedule
        need(s.train_steps >= 1, "schedule.train_steps: must be >= 1")
        need(1 <= s.inference_steps <= s.train_steps, "schedule.inference_steps: must lie in [1, train_steps]")
        need(s.variance in VARIANCES, f"schedule.variance: must be one of {VARIANCES}")
        need(self.data.n_per_style >= 1, "data.n_per_style: must be >= 1")
        need(self.data.n_styles >= 2, "data.n_styles: must be >= 2")
        r = self.reward
        need(r.k >= 1, "reward.k: must be >= 1")
        need(r.temperature > 0, "reward.temperature: must be positive")
        need(r.epsilon > 0, "reward.epsilon: must be positive")
        need(r.embed_scale > 0, "reward.embed_scale: must be positive")
        p = self.prompts
        need(all(m in MEDIUMS for m in p.mediums) and p.mediums, f"prompts.mediums: entries must come from {MEDIUMS}")
        need(all(x in SUBJECTS for x in p.subjects) and p.subjects, f"prompts.subjects: entries must come from {SUBJECTS}")
        need(0 <= p.null_probability <= 1, "prompts.null_probability: must lie in [0, 1]")
        t = self.trainer
        for name in ("epochs", "batches_per_epoch", "batch_size", "grad_accum_steps", "inner_epochs", "lora_rank"):
            need(getattr(t, name) >= 1, f"trainer.{name}: must be >= 1")
        need(t.clip_epsilon > 0, "trainer.clip_epsilon: must be positive")
        need(t.lr >= 0, "trainer.lr: must be >= 0")
        c = self.can
        need(c.wasserstein_lambda is None, "can.wasserstein_lambda: the gradient-penalty variant is not supported")
        need(len(c.head_widths) == 2, "can.head_widths: must list two widths")
        if self.mode == "can":
            need(self.image_dim >= 16, "image_dim: CAN runs need image_dim >= 16")
        if self.classifier == "dcgan" and self.mode != "can":
            need(r.head_checkpoint is not None, "reward.head_checkpoint: required for the dcgan classifier")
        if self.mode == "evaluate":
            need(self.evaluate.base_checkpoint is not None, "evaluate.base_checkpoint: required in evaluate mode")
        if check_paths:
            for label, path in self.referenced_paths():
                need(Path(path).exists(), f"{label}: file not found: {path}")
        if errors:
            raise ConfigError("invalid experiment config", errors)
        return self

    def referenced_paths(self):
        out = []
        for label, path in (
            ("model.checkpoint", self.model.checkpoint),
            ("reward.centers", self.reward.centers),
            ("reward.head_checkpoint", self.reward.head_checkpoint),
            ("data.image_root", self.data.image_root),
            ("evaluate.base_checkpoint", self.evaluate.base_checkpoint),
        ):
            if path is not None:
                out.append((label, path))
        out += [(f"evaluate.adapters.{k}", v) for k, v in self.evaluate.adapters.items()]
        return out


def _build(cls, data, prefix, errors):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(f"{prefix or 'config'}: expected a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in known:
            errors.append(f"{name}: unknown key")
            continue
        default = known[key].default_factory() if known[key].default_factory is not MISSING else known[key].default
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{name}.", errors)
        else:
            kwargs[key] = _coerce(value, default, name, errors)
    return cls(**kwargs)



def _coerce(value, default, name, errors):
    """Check ``value`` against the default's type; on mismatch record an error and keep the default."""
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        expected = "true/false"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        expected = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        expected = "a number"
        value = float(value) if ok else value
    elif isinstance(default, (list, dict, str)):
        ok = isinstance(value, type(default))
        expected = f"a {type(default).__name__}"
    else:
        ok, expected = True, ""
    if not ok:
        errors.append(f"{name}: expected {expected}, got {value!r}")
        return default
    return value


def config_from_dict(data, check_paths=True):
    errors = []
    cfg = _build(ExperimentConfig, data, "", errors)
    try:
        cfg.validate(check_paths)
    except ConfigError as exc:
        errors.extend(exc.errors)
    if errors:
        raise ConfigError("invalid experiment config", errors)
    return cfg


def parse_override(text):
    """``a.b=value`` to ``(["a", "b"], parsed value)``; the value is read as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not key=value", [f"{text}: expected key=value"])
    return key.split("."), yaml.safe_load(raw)


def apply_overrides(data, overrides):
    data = json.loads(json.dumps(data or {}))
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return data


def load_config(path, overrides=(), check_paths=True):
    """Read a YAML config, apply ``key=value`` overrides and validate.

    Relative input paths are tried as given, then against the config file's
    directory, then against the output root.
    """
    path = Path(path)
    data = yaml.safe_load(path.read_text()) or {}
    data = apply_overrides(data, overrides)
    cfg = config_from_dict(data, check_paths=False)
    roots = [path.parent] + ([Path(os.environ[OUTPUT_ROOT_ENV])] if os.environ.get(OUTPUT_ROOT_ENV) else [])

    def resolve(value):
        if value is None or Path(value).is_absolute() or Path(value).exists():
            return value
        for root in roots:
            if (root / value).exists():
                return str(root / value)
        return value

    for section, key in (("model", "checkpoint"), ("reward", "centers"), ("reward", "head_checkpoint"),
                         ("data", "image_root"), ("evaluate", "base_checkpoint")):
        obj = getattr(cfg, section)
        setattr(obj, key, resolve(getattr(obj, key)))
    cfg.evaluate.adapters = {k: resolve(v) for k, v in cfg.evaluate.adapters.items()}
    return cfg.validate(check_paths)


def profile_names():
    return sorted(p.name[:-5] for p in resources.files("creative_diffusion.profiles").iterdir() if p.name.endswith(".yaml"))


def profile_path(name):
    """Path of a shipped profile, e.g. ``desk-ddpo-kmeans-image``."""
    p = resources.files("creative_diffusion.profiles") / f"{name}.yaml"
    if not p.is_file():
        raise ConfigError(f"unknown profile {name!r}; available: {profile_names()}", [f"profile: {name} not found"])
    return Path(str(p))

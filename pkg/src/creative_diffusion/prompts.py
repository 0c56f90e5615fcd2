"""Prompt composition and the WikiArt style registry."""
from dataclasses import dataclass

import numpy as np

from ._validation import as_rng

# Mediums keep their trailing space so that ``medium + subject`` is the prompt.
MEDIUMS = ("painting of ", "picture of ", "drawing of ")
SUBJECTS = (
    "a man",
    "a woman",
    "a landscape",
    "nature",
    "a building",
    "an animal",
    "shapes",
    "an object",
)
NULL_PROMPT_PROBABILITY = 0.10

STYLES = (
    "contemporary-realism",
    "art-nouveau-modern",
    "abstract-expressionism",
    "northern-renaissance",
    "mannerism-late-renaissance",
    "early-renaissance",
    "realism",
    "action-painting",
    "color-field-painting",
    "pop-art",
    "new-realism",
    "pointillism",
    "expressionism",
    "analytical-cubism",
    "symbolism",
    "fauvism",
    "minimalism",
    "cubism",
    "romanticism",
    "ukiyo-e",
    "high-renaissance",
    "synthetic-cubism",
    "baroque",
    "post-impressionism",
    "impressionism",
    "rococo",
    "na-ve-art-primitivism",
)


@dataclass(frozen=True)
class StyleRegistry:
    """Ordered style names. Classifier outputs are indexed by this order."""

    names: tuple = STYLES

    def __post_init__(self):
        names = tuple(self.names)
        if len(set(names)) != len(names):
            raise ValueError("style names must be unique")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __getitem__(self, i):
        return self.names[i]

    def index(self, name):
        return self.names.index(name)

    def to_list(self):
        return list(self.names)

    @classmethod
    def wikiart(cls):
        return cls(STYLES)


@dataclass(frozen=True)
class PromptSpec:
    medium: str | None
    subject: str | None

    def __post_init__(self):
        if (self.medium is None) != (self.subject is None):
            raise ValueError("medium and subject must both be set or both be None")
        if self.medium is not None and self.medium not in MEDIUMS:
            raise ValueError(f"unknown medium {self.medium!r}")
        if self.subject is not None and self.subject not in SUBJECTS:
            raise ValueError(f"unknown subject {self.subject!r}")

    @property
    def is_null(self):
        return self.medium is None

    @property
    def text(self):
        return "" if self.is_null else self.medium + self.subject

    @classmethod
    def null(cls):
        return cls(None, None)

    @classmethod
    def from_text(cls, text):
        if text == "":
            return cls.null()
        for medium in MEDIUMS:
            if text.startswith(medium) and text[len(medium):] in SUBJECTS:
                return cls(medium, text[len(medium):])
        raise ValueError(f"{text!r} is not a medium+subject composition")


def all_prompts():
    """The 24 non-null compositions in medium-major order."""
    return [PromptSpec(m, s) for m in MEDIUMS for s in SUBJECTS]


def compose_prompt(rng=None, null_probability=NULL_PROMPT_PROBABILITY):
    """Draw a prompt: null with ``null_probability``, else a uniform medium and subject."""
    rng = as_rng(rng)
    if rng.random() < null_probability:
        return PromptSpec.null()
    medium = MEDIUMS[rng.integers(len(MEDIUMS))]
    subject = SUBJECTS[rng.integers(len(SUBJECTS))]
    return PromptSpec(medium, subject)


def compose_prompts(n, rng=None, null_probability=NULL_PROMPT_PROBABILITY):
    rng = as_rng(rng)
    return [compose_prompt(rng, null_probability) for _ in range(n)]


def prompt_slug(prompt):
    text = prompt.text if isinstance(prompt, PromptSpec) else str(prompt)
    slug = "".join(ch if ch.isalnum() else "-" for ch in text.lower()).strip("-")
    while "--" in slug:
        slug = slug.replace("--", "-")
    return slug or "null"


def prompt_frequencies(prompts):
    """Empirical frequency of each prompt text ("" for null) in ``prompts``."""
    texts = [p.text for p in prompts]
    keys, counts = np.unique(texts, return_counts=True)
    return dict(zip(keys.tolist(), (counts / len(texts)).tolist()))


@dataclass(frozen=True)
class PromptSource:
    """Prompt composer restricted to a subset of mediums and subjects."""

    mediums: tuple = MEDIUMS
    subjects: tuple = SUBJECTS
    null_probability: float = NULL_PROMPT_PROBABILITY

    def __post_init__(self):
        object.__setattr__(self, "mediums", tuple(self.mediums))
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if not self.mediums or not self.subjects:
            raise ValueError("a prompt source needs at least one medium and one subject")
        for m in self.mediums:
            PromptSpec(m, SUBJECTS[0])
        for s in self.subjects:
            PromptSpec(MEDIUMS[0], s)
        if not 0.0 <= self.null_probability <= 1.0:
            raise ValueError("null_probability must lie in [0, 1]")

    def draw(self, n, rng=None):
        rng = as_rng(rng)
        out = []
        for _ in range(n):
            if rng.random() < self.null_probability:
                out.append(PromptSpec.null())
            else:
                out.append(PromptSpec(self.mediums[rng.integers(len(self.mediums))], self.subjects[rng.integers(len(self.subjects))]))
        return out

"""Deterministic stand-in for a pretrained text encoder.

Each action label is expanded through K prompt templates; every
(label, template) pair maps to a pseudorandom point on the unit sphere,
and the K points are averaged and renormalized into one frozen embedding
per label. Embeddings depend only on (vocabulary index, template index,
seed), so they are bit-reproducible and never receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, VocabularyError

PLACEHOLDER = "{label}"

# Three template families: label-first ("prefix"), label-last ("suffix"),
# and the bare label. Eleven patterns total. The exact wording is this
# package's own; only the three families and the count are meaningful.
DEFAULT_TEMPLATES: tuple[str, ...] = (
    "{label} this is an action",
    "{label} is being performed",
    "{label} by one of the players",
    "{label} seen from the sideline",
    "{label} during a team play",
    "Playing action of {label}",
    "A photo of a person {label}",
    "An athlete performing {label}",
    "The player on the court is {label}",
    "Video frame showing {label}",
    "{label}",
)


@dataclass(frozen=True)
class PromptTemplate:
    """One prompt pattern with a single label placeholder."""

    kind: str      # "prefix", "suffix" or "label-only"
    pattern: str

    def __post_init__(self):
        if self.pattern.count(PLACEHOLDER) != 1:
            raise ConfigError(
                f"template must contain exactly one {PLACEHOLDER!r} placeholder: {self.pattern!r}")

    def expand(self, label_text: str) -> str:
        return self.pattern.replace(PLACEHOLDER, label_text)


def classify_pattern(pattern: str) -> str:
    stripped = pattern.strip()
    if stripped == PLACEHOLDER:
        return "label-only"
    if stripped.startswith(PLACEHOLDER):
        return "prefix"
    return "suffix"


def make_templates(patterns=DEFAULT_TEMPLATES) -> tuple[PromptTemplate, ...]:
    return tuple(PromptTemplate(classify_pattern(p), p) for p in patterns)


def load_templates(path) -> tuple[PromptTemplate, ...]:
    """Read templates from a text file, one pattern per line.

    Blank lines and lines starting with '#' are skipped.
    """
    patterns = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                patterns.append(line)
    if not patterns:
        raise ConfigError(f"no templates found in {path}")
    return make_templates(tuple(patterns))


@dataclass(frozen=True)
class TeacherEmbedding:
    label: int
    vector: np.ndarray


class TextTeacher:
    """Frozen per-label embedding source.

    ``calls`` counts every :meth:`embed` (and :meth:`embedding_matrix`)
    invocation; the evaluation path checks it stays untouched, since the
    teacher exists only at training time.
    """

    def __init__(self, vocabulary, dim: int = 512, seed: int = 0,
                 templates: tuple[PromptTemplate, ...] | None = None):
        if dim < 1:
            raise ConfigError(f"embedding dimension must be >= 1, got {dim}")
        self.vocabulary = tuple(vocabulary)
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise ConfigError("duplicate labels in vocabulary")
        self.dim = dim
        self.seed = seed
        self.templates = make_templates() if templates is None else tuple(templates)
        self._index = {name: i for i, name in enumerate(self.vocabulary)}
        self._cache: dict[int, np.ndarray] = {}
        self.calls = 0

    def _label_id(self, label) -> int:
        if isinstance(label, (int, np.integer)):
            if not 0 <= int(label) < len(self.vocabulary):
                raise VocabularyError(f"label id {int(label)} outside vocabulary of size {len(self.vocabulary)}")
            return int(label)
        if label not in self._index:
            raise VocabularyError(f"unknown label {label!r}")
        return self._index[label]

    def expand_prompts(self, label) -> list[str]:
        """All K prompt strings for one label."""
        text = self.vocabulary[self._label_id(label)]
        return [t.expand(text) for t in self.templates]

    def embed(self, label) -> TeacherEmbedding:
        """Unit-norm embedding for a label: per-template sphere points,
        averaged and renormalized."""
        self.calls += 1
        lid = self._label_id(label)
        if lid not in self._cache:
            acc = np.zeros(self.dim)
            for t_idx in range(len(self.templates)):
                rng = np.random.default_rng([self.seed, t_idx, lid])
                v = rng.standard_normal(self.dim)
                acc += v / np.linalg.norm(v)
            acc /= len(self.templates)
            self._cache[lid] = acc / np.linalg.norm(acc)
        return TeacherEmbedding(lid, self._cache[lid].copy())

    def embedding_matrix(self, labels) -> np.ndarray:
        """Stacked embeddings for a sequence of labels, one per row."""
        return np.stack([self.embed(lab).vector for lab in labels])

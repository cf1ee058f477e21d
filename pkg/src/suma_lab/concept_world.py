"""Synthetic concept hierarchy: broad parents with narrow children, Gaussian
"images" in a small feature space, and a nearest-centroid classifier used as
ground truth for attack success rates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

FEATURE_DIM = 12
COVARIANCE_SCALE = 0.5

# (id, parent, category); parents listed first. Category tags mirror the
# subclass / identity / instance task families.
DEFAULT_TABLE = (
    ("dog", None, "broad"),
    ("person", None, "broad"),
    ("cat", None, "broad"),
    ("springer", "dog", "subclass"),
    ("beagle", "dog", "subclass"),
    ("poodle", "dog", "subclass"),
    ("elon", "person", "identity"),
    ("beckham", "person", "identity"),
    ("grumpy_cat", "cat", "instance"),
    ("sphynx", "cat", "instance"),
)


@dataclass(frozen=True)
class ConceptSpec:
    id: str
    parent_id: Optional[str]
    mean: np.ndarray
    covariance_scale: float
    vocab_token: str
    category: str = "broad"

    @property
    def is_narrow(self) -> bool:
        return self.parent_id is not None


@dataclass(frozen=True)
class ImageSample:
    features: np.ndarray
    concept_id: str


def build_universe(seed: int = 0, table: Sequence = DEFAULT_TABLE,
                   feature_dim: int = FEATURE_DIM,
                   covariance_scale: float = COVARIANCE_SCALE,
                   parent_radius: float = 6.0,
                   child_offset: float = 3.0) -> list[ConceptSpec]:
    """Parents sit at `parent_radius` along mutually orthogonal directions of a
    seeded random frame; each child is its parent plus `child_offset` along a
    fresh orthogonal direction. Needs feature_dim >= number of concepts."""
    n = len(table)
    if feature_dim < n:
        raise ValueError(f"feature_dim={feature_dim} < {n} concepts")
    ids = [row[0] for row in table]
    if len(set(ids)) != n:
        raise ValueError("duplicate concept ids")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A11]))
    frame, _ = np.linalg.qr(rng.standard_normal((feature_dim, feature_dim)))
    means: dict[str, np.ndarray] = {}
    col = 0
    for cid, parent, _ in table:
        if parent is None:
            means[cid] = parent_radius * frame[:, col]
            col += 1
    for cid, parent, _ in table:
        if parent is not None:
            if parent not in means:
                raise ValueError(f"{cid}: unknown parent {parent!r}")
            means[cid] = means[parent] + child_offset * frame[:, col]
            col += 1
    out = []
    for cid, parent, cat in table:
        m = means[cid]
        m.setflags(write=False)
        out.append(ConceptSpec(cid, parent, m, covariance_scale, cid, cat))
    return out


def universe_table(universe: Sequence[ConceptSpec]) -> list[tuple]:
    return [(c.id, c.parent_id, c.category) for c in universe]


def by_id(universe: Sequence[ConceptSpec]) -> dict[str, ConceptSpec]:
    return {c.id: c for c in universe}


def children_of(universe: Sequence[ConceptSpec], parent_id: str) -> list[ConceptSpec]:
    return [c for c in universe if c.parent_id == parent_id]


def sample_image(concept: ConceptSpec, rng: np.random.Generator) -> ImageSample:
    x = concept.mean + concept.covariance_scale * rng.standard_normal(concept.mean.shape)
    return ImageSample(x, concept.id)


def sample_features(concept: ConceptSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised `sample_image`: (n, D) feature array."""
    return concept.mean + concept.covariance_scale * rng.standard_normal((n, concept.mean.size))


class NearestCentroid:
    """argmin_c |x - mean_c|, ties to the lexicographically smallest id."""

    def __init__(self, universe: Sequence[ConceptSpec]):
        if not universe:
            raise ValueError("empty universe")
        order = sorted(universe, key=lambda c: c.id)
        self.ids = [c.id for c in order]
        self.means = np.stack([c.mean for c in order])

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        d2 = ((x[:, None, :] - self.means[None, :, :]) ** 2).sum(-1)
        # distances equal up to rounding count as ties; argmax then picks the
        # first candidate, i.e. the smallest id thanks to sorting
        lo = d2.min(axis=1, keepdims=True)
        near = d2 <= lo + 1e-12 * np.maximum(lo, 1.0)
        return np.array(self.ids, dtype=object)[np.argmax(near, axis=1)]

    def __call__(self, x) -> str:
        return str(self.predict(x)[0])


def classify(x, universe: Sequence[ConceptSpec]) -> str:
    return NearestCentroid(universe)(x)

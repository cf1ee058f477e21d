"""Evaluation: attack success rates, toy utility proxies (Frechet distance and
centroid cosine on the feature space), token-cosine analyses and the token
distance table."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .concept_world import ConceptSpec
from .subspace_math import cosine_to_subspace, psd_sqrt
from .toy_t2i import ToyT2I, sample_cond

SCHEMA_VERSION = 1


class DegenerateCovariance(ValueError):
    pass


def asr(model: ToyT2I, cond: np.ndarray, classifier, target: str, n: int = 200,
        seed: int = 0) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    x = sample_cond(model, cond, n, seed)
    return float(np.mean(classifier.predict(x) == target))


def fit_gaussian(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < d + 1:
        raise DegenerateCovariance(f"{n} samples cannot fit a {d}-dim covariance (need {d + 1})")
    return x.mean(axis=0), np.cov(x, rowvar=False)


def frechet_distance(mu1, s1, mu2, s2) -> float:
    """|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).

    The inner product is symmetric PSD, so its root comes from eigh and the
    result does not depend on argument order beyond rounding."""
    r1 = psd_sqrt(s1)
    inner = r1 @ s2 @ r1
    cross = psd_sqrt(0.5 * (inner + inner.T))
    diff = np.asarray(mu1) - np.asarray(mu2)
    return float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))


def fid_from_features(xa, xb) -> float:
    return frechet_distance(*fit_gaussian(xa), *fit_gaussian(xb))


def probe_features(model: ToyT2I, conds: Sequence[np.ndarray], n: int, seed: int) -> np.ndarray:
    """Pooled samples over probe prompts. Prompt j uses seed + j, so two
    models compared on the same probes share their noise."""
    return np.concatenate([sample_cond(model, c, n, seed + 1009 * j) for j, c in enumerate(conds)])


def toy_fid(model_a: ToyT2I, model_b: ToyT2I, probe_conds: Sequence[np.ndarray],
            n: int = 64, seed: int = 0) -> float:
    d = model_a.dims.feature_dim
    if n * len(probe_conds) < d + 1:
        raise DegenerateCovariance(f"n * prompts = {n * len(probe_conds)} < {d + 1}")
    xa = probe_features(model_a, probe_conds, n, seed)
    xb = probe_features(model_b, probe_conds, n, seed)
    return fid_from_features(xa, xb)


def centroid_cosine(x: np.ndarray, centroid: np.ndarray) -> float:
    x = np.atleast_2d(x)
    c = np.asarray(centroid, dtype=np.float64)
    num = x @ c
    den = np.linalg.norm(x, axis=1) * np.linalg.norm(c)
    return float(np.mean(num / np.maximum(den, 1e-12)))


def toy_clip(model: ToyT2I, cond: np.ndarray, concept: ConceptSpec, n: int = 64,
             seed: int = 0) -> float:
    return centroid_cosine(sample_cond(model, cond, n, seed), concept.mean)


def probe_concepts(universe: Sequence[ConceptSpec], exclude: Sequence[str]) -> list:
    ex = set(exclude)
    return [c for c in universe if c.id not in ex]


def utility(model: ToyT2I, reference: ToyT2I, universe, exclude, n: int = 64, seed: int = 0):
    """(toy_fid vs reference, mean toy_clip) over the non-target concepts."""
    probes = probe_concepts(universe, exclude)
    conds = [model.concept_cond(c.vocab_token) for c in probes]
    fid = toy_fid(model, reference, conds, n, seed)
    clip = float(np.mean([toy_clip(model, cd, c, n, seed + 1009 * j)
                          for j, (c, cd) in enumerate(zip(probes, conds))]))
    return fid, clip


# ----------------------------------------------------------------------------
# token analyses


def _unit(x):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def pairwise_cosines(tokens) -> np.ndarray:
    """Upper-triangle cosines within one set."""
    u = _unit(tokens)
    g = u @ u.T
    return g[np.triu_indices(len(u), k=1)]


def cross_cosines(a, b) -> np.ndarray:
    return (_unit(a) @ _unit(b).T).ravel()


def c_curve(tokens) -> np.ndarray:
    """c_t = mean over j > t of cos(x_j, span(x_1..x_t)), t = 1..n-1."""
    xs = np.asarray(tokens, dtype=np.float64)
    out = []
    for t in range(1, len(xs)):
        basis = xs[:t].T
        out.append(np.mean([cosine_to_subspace(x, basis) for x in xs[t:]]))
    return np.array(out)


def heldout_curve(tokens, heldout) -> np.ndarray:
    """cos(heldout, span(x_1..x_t)) for t = 1..n; non-decreasing by nesting."""
    xs = np.asarray(tokens, dtype=np.float64)
    return np.array([cosine_to_subspace(heldout, xs[:t].T) for t in range(1, len(xs) + 1)])


@dataclass
class CosineReport:
    within: np.ndarray
    across: np.ndarray
    c_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    heldout: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def summary(self) -> dict:
        return {"mean_within": float(self.within.mean()), "mean_across": float(self.across.mean()),
                "c_t": [float(v) for v in self.c_t], "heldout": [float(v) for v in self.heldout]}

    def histogram_csv(self, bins: int = 20) -> str:
        edges = np.linspace(-1.0, 1.0, bins + 1)
        hw, _ = np.histogram(self.within, edges)
        ha, _ = np.histogram(self.across, edges)
        buf = io.StringIO()
        buf.write(f"# schema_version={SCHEMA_VERSION}\n")
        buf.write("bin_lo,bin_hi,within,across\n")
        for lo, hi, a, b in zip(edges[:-1], edges[1:], hw, ha):
            buf.write(f"{lo:.3f},{hi:.3f},{a},{b}\n")
        return buf.getvalue()


def cosine_report(same_model_tokens, other_tokens, chain_tokens=None, heldout=None) -> CosineReport:
    rep = CosineReport(pairwise_cosines(same_model_tokens),
                       cross_cosines(same_model_tokens, other_tokens))
    if chain_tokens is not None and len(chain_tokens) >= 2:
        rep.c_t = c_curve(chain_tokens)
        if heldout is not None:
            rep.heldout = heldout_curve(chain_tokens, heldout)
    return rep


def distance_report(u, v_early, textual) -> dict:
    u, v, t = (np.asarray(x, dtype=np.float64) for x in (u, v_early, textual))
    return {"u_to_early": float(np.linalg.norm(u - v)), "u_to_textual": float(np.linalg.norm(u - t))}


# ----------------------------------------------------------------------------
# reports


def canonical_json(obj) -> str:
    """Sorted keys, fixed separators, floats via repr; NaN is refused."""
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1, allow_nan=False) + "\n"


@dataclass
class MetricsReport:
    asr_textual: Optional[float] = None
    asr_cce: Optional[float] = None
    asr_ud: Optional[float] = None
    toy_fid: Optional[float] = None
    toy_clip: Optional[float] = None
    per_concept: dict = field(default_factory=dict)
    config_fingerprint: str = ""
    seed: int = 0
    n_eval: int = 200
    skipped: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def finalize(self) -> "MetricsReport":
        """Mark every unset headline field as skipped."""
        for name in ("asr_textual", "asr_cce", "asr_ud", "toy_fid", "toy_clip"):
            if getattr(self, name) is None and name not in self.skipped:
                self.skipped.append(name)
        self.skipped.sort()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

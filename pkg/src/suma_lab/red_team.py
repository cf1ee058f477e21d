"""Attacks on erased models.

CCE: textual inversion against the erased model, on images disjoint from
those used during construction. UD: a discrete prompt attack that optimises a
right-stochastic token-selection matrix X with projected gradient descent;
the forward pass uses one-hot(argmax X) and the gradient is passed straight
through to X.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .concept_world import ConceptSpec
from .inversion import TiTrajectory, run_ti
from .subspace_math import cosine_to_subspace, project_simplex_rows
from .toy_t2i import EOT, INIT_WORD, Prompt, ToyT2I, denoising_batch, mse_loss, sample, sample_cond

N_EVAL = 200


def asr_of(model: ToyT2I, cond: np.ndarray, concept_id: str, classifier, n: int = N_EVAL,
           seed: int = 0) -> float:
    x = sample_cond(model, cond, n, seed)
    return float(np.mean(classifier.predict(x) == concept_id))


@dataclass
class AttackReport:
    attack: str
    concept: str
    model_id: str
    asr: float
    tokens: list = field(default_factory=list)
    step_count: int = 0
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ----------------------------------------------------------------------------
# CCE


@dataclass
class CceResult:
    token: np.ndarray
    asr: float
    trajectory: TiTrajectory
    report: AttackReport


def attack_cce(model: ToyT2I, concept: ConceptSpec, images: np.ndarray, classifier,
               ti_steps: int, rng: np.random.Generator, lr: float = 2e-3,
               init_token: str = INIT_WORD, batch: int = 16, n_eval: int = N_EVAL,
               eval_seed: int = 0) -> CceResult:
    traj = run_ti(model, images, ti_steps, lr, rng, init_token=init_token, batch=batch,
                  target_concept=concept.id)
    tok = traj.final()
    x = sample(model, model.encoder.placeholder_prompt(), n_eval, eval_seed, placeholder=tok)
    asr = float(np.mean(classifier.predict(x) == concept.id))
    rep = AttackReport("cce", concept.id, model.fingerprint(), asr,
                       [float(v) for v in tok], ti_steps, eval_seed)
    return CceResult(tok, asr, traj, rep)


# ----------------------------------------------------------------------------
# UnlearnDiff


@dataclass
class UdState:
    X: np.ndarray          # (k, V) right-stochastic
    vocab_ids: np.ndarray  # (V,) encoder ids selectable by the attack
    eta: float = 0.1

    @classmethod
    def uniform(cls, k: int, vocab_ids, eta: float = 0.1) -> "UdState":
        if k < 1:
            raise ValueError("k must be >= 1")
        vocab_ids = np.asarray(vocab_ids)
        return cls(np.full((k, vocab_ids.size), 1.0 / vocab_ids.size), vocab_ids, eta)

    @property
    def k(self) -> int:
        return self.X.shape[0]

    def onehot(self) -> np.ndarray:
        Y = np.zeros_like(self.X)
        Y[np.arange(self.k), np.argmax(self.X, axis=1)] = 1.0
        return Y

    def selected(self) -> np.ndarray:
        return self.vocab_ids[np.argmax(self.X, axis=1)]


def ud_prompt(model: ToyT2I, concept: ConceptSpec, k: int) -> tuple[Prompt, list]:
    """'a photo of <concept>' followed by k adversarial slots, then EOT.
    Slots are filled with EOT ids as stand-ins; their embeddings are overridden."""
    enc = model.encoder
    base = enc.concept_prompt(concept.vocab_token)
    toks = list(base.tokens[:-1]) + [enc.token_id(EOT)] * k + [base.tokens[-1]]
    if len(toks) > enc.max_len:
        raise ValueError(f"k={k} does not fit: prompt length {len(toks)} > {enc.max_len}")
    pos = list(range(len(base.tokens) - 1, len(base.tokens) - 1 + k))
    return Prompt(tuple(toks)), pos


def ud_forward(state: UdState, model: ToyT2I, prompt: Prompt, positions: Sequence[int],
               z_t, t, eps):
    """Denoising loss for the discrete prompt chosen by argmax X, and the
    straight-through gradient w.r.t. X."""
    enc = model.encoder
    Z = enc.embeddings[state.vocab_ids]  # (V, d)
    c = state.onehot() @ Z
    x_in = enc.embed(prompt, overrides={p: c[j] for j, p in enumerate(positions)})
    cond, ecache = enc.forward(x_in)
    pred, cache = model.forward(z_t, t, cond)
    loss, dpred = mse_loss(pred, eps)
    _, dcond = model.backward(cache, dpred, want_params=False)
    dx = enc.backward(dcond, ecache)
    dY = dx[list(positions)] @ Z.T
    return loss, dY


def ud_cond(model: ToyT2I, prompt: Prompt, positions, token_ids) -> np.ndarray:
    enc = model.encoder
    over = {p: enc.embeddings[i] for p, i in zip(positions, token_ids)}
    return enc.encode(prompt, overrides=over)


@dataclass
class UdResult:
    token_ids: np.ndarray
    words: list
    asr: float
    losses: np.ndarray
    prompt: Prompt
    positions: list
    report: AttackReport


def attack_ud(model: ToyT2I, concept: ConceptSpec, images: np.ndarray, classifier,
              rng: np.random.Generator, k: int = 3, steps: int = 300, eta: float = 0.1,
              batch: int = 16, n_eval: int = N_EVAL, eval_seed: int = 0,
              vocab_ids=None) -> UdResult:
    enc = model.encoder
    vocab_ids = enc.word_ids() if vocab_ids is None else np.asarray(vocab_ids)
    state = UdState.uniform(k, vocab_ids, eta)
    prompt, pos = ud_prompt(model, concept, k)
    losses = np.zeros(steps)
    for s in range(steps):
        x0 = images[rng.integers(0, images.shape[0], size=batch)]
        z_t, t, eps = denoising_batch(model, x0, rng)
        loss, g = ud_forward(state, model, prompt, pos, z_t, t, eps)
        losses[s] = loss
        state.X = project_simplex_rows(state.X - eta * g)
    ids = state.selected()
    asr = asr_of(model, ud_cond(model, prompt, pos, ids), concept.id, classifier, n_eval,
                 eval_seed)
    words = [enc.vocab[i] for i in ids]
    rep = AttackReport("ud", concept.id, model.fingerprint(), asr, words, steps, eval_seed)
    return UdResult(ids, words, asr, losses, prompt, pos, rep)


def eot_subspace_cosine(model: ToyT2I, tokens_u: Sequence[np.ndarray], ud: UdResult) -> float:
    """Cosine between the UD prompt's EOT vector and the span of the EOT
    vectors of 'a photo of <u_j>'."""
    enc = model.encoder
    ph = enc.placeholder_prompt()
    basis = np.stack([enc.encode(ph, u)[-1] for u in tokens_u], axis=1)
    x = ud_cond(model, ud.prompt, ud.positions, ud.token_ids)[-1]
    return cosine_to_subspace(x, basis)


def write_reports(path, reports: Sequence[AttackReport]) -> None:
    with open(path, "w") as f:
        json.dump([asdict(r) for r in reports], f, indent=1, sort_keys=True)
        f.write("\n")

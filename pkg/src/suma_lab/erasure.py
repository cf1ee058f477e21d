"""Concept erasure on the cross-attention key/value projections.

Contains the concept-ablation baseline, the two-stage subspace mapping method
(iterative subspace construction, then elimination with projection and
regularisation losses), the subspace pushing variant, the erase-all-tokens
baseline, closest-token construction and multi-concept erasure.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .concept_world import ConceptSpec
from .inversion import run_ti
from .optim import Adam, check_finite, clip_global_norm
from .subspace_math import Subspace
from .toy_t2i import ToyT2I, cross_attn_names, mse_loss

MODES = ("suma", "push", "sub_only", "ca_only", "erase_all_tokens")


@dataclass
class TiConfig:
    steps: int = 500
    lr: float = 2e-3
    batch: int = 16
    checkpoint_stride: int = 10
    n_images: int = 32
    init_token: str = "toy"


@dataclass
class ErasureConfig:
    l: int = 3
    early_step: int = 50
    elimination_steps: int = 500
    subclass_steps: int = 750
    lr: float = 2e-3
    lambda_reg: float = 1.0
    mode: str = "suma"
    tau: Optional[float] = None
    push_scale: float = 2.0
    kinds: tuple = ("k", "v")
    batch: int = 8
    clip: float = 1.0
    ca_steps: int = 300
    ca_lr: float = 2e-3
    live_projector: bool = False
    ca_on_ti_tokens: bool = False
    literal_ca: bool = False

    def __post_init__(self):
        if self.l < 1:
            raise ValueError("l must be >= 1")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be >= 0")
        if self.elimination_steps < 1 or self.ca_steps < 0:
            raise ValueError("step counts must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        self.kinds = tuple(self.kinds)

    def steps_for(self, concept: ConceptSpec) -> int:
        return self.subclass_steps if concept.category == "subclass" else self.elimination_steps


# ----------------------------------------------------------------------------
# concept ablation


@dataclass
class CATask:
    """Map the student's prediction on `target_cond` to the frozen teacher's
    prediction on `anchor_cond`, over latents noised from `images`."""

    target_cond: np.ndarray
    anchor_cond: np.ndarray
    images: np.ndarray
    weight: float = 1.0


def ca_loss(student: ToyT2I, teacher: ToyT2I, target_cond, anchor_cond, z_t, t,
            kinds=("k", "v"), literal: bool = False):
    """mean |Phi'(z_t, target) - Phi(z_t, anchor)|^2 with gradients w.r.t. the
    student's cross-attention weights.

    ``literal=True`` swaps the pairing (student on the anchor prompt, teacher
    on the target prompt).
    """
    s_cond, t_cond = (anchor_cond, target_cond) if literal else (target_cond, anchor_cond)
    ref = teacher.forward(z_t, t, t_cond)[0]
    pred, cache = student.forward(z_t, t, s_cond)
    loss, dpred = mse_loss(pred, ref)
    grads, _ = student.backward(cache, dpred, want_params=True, want_cond=False)
    names = cross_attn_names(student.n_layers, kinds)
    return loss, {k: grads[k] for k in names}


def _noised(model: ToyT2I, images, batch, rng):
    x0 = images[rng.integers(0, images.shape[0], size=batch)]
    t = rng.integers(1, model.schedule.T + 1, size=batch)
    eps = rng.standard_normal(x0.shape)
    return model.schedule.q_sample(x0, t, eps), t


def ca_objective(student, teacher, tasks: Sequence[CATask], rng, batch, kinds, literal=False):
    total = 0.0
    grads = None
    for task in tasks:
        z_t, t = _noised(student, task.images, batch, rng)
        loss, g = ca_loss(student, teacher, task.target_cond, task.anchor_cond, z_t, t,
                          kinds, literal)
        total += task.weight * loss
        if grads is None:
            grads = {k: task.weight * v for k, v in g.items()}
        else:
            for k, v in g.items():
                grads[k] += task.weight * v
    return total, grads


def erase_ca(model: ToyT2I, tasks: Sequence[CATask], steps: int, lr: float,
             rng: np.random.Generator, teacher: Optional[ToyT2I] = None,
             kinds=("k", "v"), batch: int = 8, clip: float | None = 1.0,
             literal: bool = False) -> ToyT2I:
    """Gradient descent on the ablation loss; only cross-attn k/v change."""
    student = model.copy()
    teacher = model if teacher is None else teacher
    opt = Adam(lr)
    for step in range(steps):
        loss, grads = ca_objective(student, teacher, tasks, rng, batch, kinds, literal)
        check_finite(loss, "concept ablation", step)
        clip_global_norm(grads, clip)
        opt.step(student.params, grads)
    return student


def textual_task(model: ToyT2I, concept: ConceptSpec, anchor: ConceptSpec, images) -> CATask:
    return CATask(model.concept_cond(concept.vocab_token), model.concept_cond(anchor.vocab_token),
                  images)


def token_task(model: ToyT2I, token, anchor: ConceptSpec, images) -> CATask:
    enc = model.encoder
    return CATask(model.cond(enc.placeholder_prompt(), token),
                  model.concept_cond(anchor.vocab_token), images)


# ----------------------------------------------------------------------------
# subspace construction


def placeholder_vector(model: ToyT2I, token) -> np.ndarray:
    """Encoded placeholder-position vector of 'a photo of <token>'."""
    enc = model.encoder
    prompt = enc.placeholder_prompt()
    return enc.encode(prompt, token)[prompt.placeholder_position]


def eot_vector(model: ToyT2I, prompt, placeholder=None, overrides=None) -> np.ndarray:
    return model.encoder.encode(prompt, placeholder, overrides)[-1]


@dataclass
class SubspacePair:
    """Per (layer, kind) target and reference subspaces built from the
    construction-time weights, plus the raw and encoded tokens behind them."""

    concept: str
    anchor: str
    tokens_u: list
    tokens_v: list
    enc_u: np.ndarray  # (l, d_text) encoded placeholder vectors
    enc_v: np.ndarray
    target: dict = field(default_factory=dict)  # (layer, kind) -> Subspace
    reference: dict = field(default_factory=dict)
    trajectories: list = field(default_factory=list)

    @property
    def l(self) -> int:
        return len(self.tokens_u)

    @classmethod
    def build(cls, model: ToyT2I, concept: str, anchor: str, tokens_u, tokens_v,
              kinds=("k", "v"), trajectories=()) -> "SubspacePair":
        if len(tokens_u) != len(tokens_v):
            raise ValueError("target and reference need the same number of tokens")
        enc_u = np.stack([placeholder_vector(model, u) for u in tokens_u])
        enc_v = np.stack([placeholder_vector(model, v) for v in tokens_v])
        pair = cls(concept, anchor, [np.array(u) for u in tokens_u],
                   [np.array(v) for v in tokens_v], enc_u, enc_v,
                   trajectories=list(trajectories))
        for i in range(model.n_layers):
            for kind in kinds:
                w = model.layer_weight(i, kind)
                pair.target[(i, kind)] = Subspace.from_basis(w @ enc_u.T, layer_index=i)
                pair.reference[(i, kind)] = Subspace.from_basis(w @ enc_v.T, layer_index=i)
        return pair

    def truncated(self, l: int) -> "SubspacePair":
        keys = list(self.target)
        kinds = tuple(dict.fromkeys(k for _, k in keys))
        out = SubspacePair(self.concept, self.anchor, self.tokens_u[:l], self.tokens_v[:l],
                           self.enc_u[:l], self.enc_v[:l], trajectories=self.trajectories[:l])
        for key in keys:
            i, kind = key
            out.target[key] = Subspace.from_basis(self.target[key].basis[:, :l], layer_index=i)
            out.reference[key] = Subspace.from_basis(self.reference[key].basis[:, :l], layer_index=i)
        return out

    def kinds(self) -> tuple:
        return tuple(dict.fromkeys(k for _, k in self.target))

    def tensors(self) -> dict:
        out = {}
        for j, (u, v) in enumerate(zip(self.tokens_u, self.tokens_v)):
            out[f"pair/{self.concept}/u/{j}"] = u
            out[f"pair/{self.concept}/v/{j}"] = v
        return out


def construct_subspaces(model: ToyT2I, concept: ConceptSpec, anchor: ConceptSpec,
                        images: np.ndarray, cfg: ErasureConfig, ti: TiConfig,
                        rng: np.random.Generator, anchor_images: Optional[np.ndarray] = None):
    """Iterative construction: erase the concept by ablation, then repeatedly
    invert it on the erased model, keep the final token as a target basis
    token and the early-step token as a reference token, and ablate the final
    token before the next round. Basis vectors use the original weights.

    Returns (pair, final erased model, list of per-iteration models).
    """
    pool = images if anchor_images is None else np.concatenate([images, anchor_images])
    theta_p = erase_ca(model, [textual_task(model, concept, anchor, pool)], cfg.ca_steps,
                       cfg.ca_lr, rng, teacher=model, kinds=cfg.kinds, batch=cfg.batch,
                       clip=cfg.clip, literal=cfg.literal_ca)
    tokens_u, tokens_v, trajs, chain = [], [], [], [theta_p]
    for j in range(cfg.l):
        traj = run_ti(theta_p, images, ti.steps, ti.lr, rng, init_token=ti.init_token,
                      batch=ti.batch, checkpoint_stride=ti.checkpoint_stride,
                      target_concept=concept.id)
        tokens_u.append(traj.final())
        tokens_v.append(traj.token_at(cfg.early_step))
        trajs.append(traj)
        theta_p = erase_ca(theta_p, [token_task(model, tokens_u[-1], anchor, pool)],
                           cfg.ca_steps, cfg.ca_lr, rng, teacher=model, kinds=cfg.kinds,
                           batch=cfg.batch, clip=cfg.clip, literal=cfg.literal_ca)
        chain.append(theta_p)
    pair = SubspacePair.build(model, concept.id, anchor.id, tokens_u, tokens_v, cfg.kinds, trajs)
    return pair, theta_p, chain


# ----------------------------------------------------------------------------
# elimination losses


def _residual_loss(params: dict, pair: SubspacePair, enc_vecs: np.ndarray, spaces: dict,
                   sign: float = 1.0):
    """sum_i sum_j |(I - P_i) W_i x_j|^2 over every (layer, kind) in `spaces`."""
    total = 0.0
    grads = {}
    for (i, kind), sub in spaces.items():
        w = params[f"blk{i}.w{kind}"]
        mapped = w @ enc_vecs.T  # (d_layer, l)
        r = mapped - sub.projector @ mapped
        total += float(np.sum(r * r))
        # d/dW |(I-P) W X|^2 = 2 (I-P)^T (I-P) W X X^T
        rr = r - sub.projector.T @ r
        grads[f"blk{i}.w{kind}"] = sign * 2.0 * rr @ enc_vecs
    return total, grads


def _live_spaces(params, pair: SubspacePair) -> dict:
    return {key: Subspace.from_basis(params[f"blk{key[0]}.w{key[1]}"] @ pair.enc_v.T, key[0])
            for key in pair.reference}


def elimination_losses(params: dict, pair: SubspacePair, lambda_reg: float = 1.0,
                       live_projector: bool = False):
    """(L_proj, L_reg, L_sub, grads of L_sub) for the cross-attn weights in `params`.

    The reference projectors are frozen at construction time unless
    ``live_projector`` rebuilds them from the current weights (gradients then
    treat the projector as a constant).
    """
    spaces = _live_spaces(params, pair) if live_projector else pair.reference
    l_proj, g_proj = _residual_loss(params, pair, pair.enc_u, spaces)
    l_reg, g_reg = _residual_loss(params, pair, pair.enc_v, spaces)
    grads = {k: g_proj[k] + lambda_reg * g_reg[k] for k in g_proj}
    return l_proj, l_reg, l_proj + lambda_reg * l_reg, grads


def push_loss(params: dict, pair: SubspacePair, tau: float):
    """max(tau - sum |W u - P_U W u|^2, 0) with P_U from the original target basis."""
    resid, g = _residual_loss(params, pair, pair.enc_u, pair.target, sign=-1.0)
    if tau - resid > 0:
        return tau - resid, g
    return 0.0, {k: np.zeros_like(v) for k, v in g.items()}


def default_tau(model: ToyT2I, pair: SubspacePair, scale: float = 2.0) -> float:
    """`scale` times the total squared norm of the mapped target basis."""
    tot = 0.0
    for (i, kind) in pair.target:
        m = model.layer_weight(i, kind) @ pair.enc_u.T
        tot += float(np.sum(m * m))
    return scale * tot


def target_residuals(params: dict, pair: SubspacePair, which: str = "u") -> np.ndarray:
    """|(I - P_V) W x_j| for every (layer, kind, j); x = encoded u or v tokens."""
    vecs = pair.enc_u if which == "u" else pair.enc_v
    out = []
    for (i, kind), sub in pair.reference.items():
        m = params[f"blk{i}.w{kind}"] @ vecs.T
        out.append(np.linalg.norm(m - sub.projector @ m, axis=0))
    return np.stack(out)


# ----------------------------------------------------------------------------
# erasure runs


@dataclass
class EraseLog:
    rows: list = field(default_factory=list)  # (step, L_CA, L_proj, L_reg, L_final)

    def add(self, *row):
        self.rows.append(tuple(float(x) for x in row))

    def to_csv(self) -> str:
        lines = ["step,L_CA,L_proj,L_reg,L_final"]
        lines += [f"{int(r[0])},{r[1]:.10g},{r[2]:.10g},{r[3]:.10g},{r[4]:.10g}" for r in self.rows]
        return "\n".join(lines) + "\n"


@dataclass
class EraseTarget:
    """One concept to erase: its textual ablation task(s) plus its subspaces."""

    ca_tasks: list
    pair: Optional[SubspacePair] = None
    token_tasks: list = field(default_factory=list)
    tau: Optional[float] = None


def make_target(model: ToyT2I, concept: ConceptSpec, anchor: ConceptSpec, images,
                pair: Optional[SubspacePair], cfg: ErasureConfig,
                anchor_images=None) -> EraseTarget:
    pool = images if anchor_images is None else np.concatenate([images, anchor_images])
    tasks = [textual_task(model, concept, anchor, pool)]
    tok_tasks = []
    if pair is not None:
        tok_tasks = [token_task(model, u, anchor, pool) for u in pair.tokens_u]
    return EraseTarget(tasks, pair, tok_tasks, cfg.tau)


def erase(model: ToyT2I, targets: Sequence[EraseTarget], cfg: ErasureConfig, steps: int,
          rng: np.random.Generator, teacher: Optional[ToyT2I] = None):
    """Shared optimisation loop for every erasure mode.

    suma / sub_only / push need a SubspacePair per target. The student starts
    from `model`; the teacher defaults to `model`. Returns (model, EraseLog).
    """
    student = model.copy()
    teacher = model if teacher is None else teacher
    names = cross_attn_names(model.n_layers, cfg.kinds)
    opt = Adam(cfg.lr)
    elog = EraseLog()
    taus = [0.0] * len(targets)
    if cfg.mode == "push":
        taus = [t.tau if t.tau is not None else default_tau(model, t.pair, cfg.push_scale)
                for t in targets]
    for step in range(steps):
        grads = {k: np.zeros_like(student.params[k]) for k in names}
        l_ca = l_proj = l_reg = l_extra = 0.0
        for tgt, tau in zip(targets, taus):
            tasks = []
            if cfg.mode != "sub_only":
                tasks = list(tgt.ca_tasks)
                if cfg.mode == "erase_all_tokens" or cfg.ca_on_ti_tokens:
                    tasks += tgt.token_tasks
            if tasks:
                loss, g = ca_objective(student, teacher, tasks, rng, cfg.batch, cfg.kinds,
                                       cfg.literal_ca)
                l_ca += loss
                for k in names:
                    grads[k] += g[k]
            if cfg.mode in ("suma", "sub_only"):
                lp, lr_, _, g = elimination_losses(student.params, tgt.pair, cfg.lambda_reg,
                                                   cfg.live_projector)
                l_proj += lp
                l_reg += lr_
                for k in names:
                    grads[k] += g[k]
            elif cfg.mode == "push":
                lp, g = push_loss(student.params, tgt.pair, tau)
                l_extra += lp
                for k in names:
                    grads[k] += g[k]
        total = l_ca + l_proj + cfg.lambda_reg * l_reg + l_extra
        check_finite(total, f"erase[{cfg.mode}]", step)
        elog.add(step, l_ca, l_proj if cfg.mode != "push" else l_extra, l_reg, total)
        clip_global_norm(grads, cfg.clip)
        opt.step(student.params, grads)
    return student, elog


def erase_suma(model, target: EraseTarget, cfg: ErasureConfig, steps: int, rng, teacher=None):
    """Minimise L_CA + L_sub starting from the original weights."""
    return erase(model, [target], replace(cfg, mode="suma"), steps, rng, teacher)


def erase_push(model, target: EraseTarget, cfg: ErasureConfig, steps: int, rng, teacher=None):
    return erase(model, [target], replace(cfg, mode="push"), steps, rng, teacher)


def erase_multi(model, targets: Sequence[EraseTarget], mode: str, cfg: ErasureConfig,
                steps: int, rng, simultaneous_steps: int = 1000):
    """IE: erase concepts one after another, each run starting from the last
    result. SE: one run over the summed objectives for `simultaneous_steps`."""
    if len(targets) < 1:
        raise ValueError("need at least one target")
    if mode == "IE":
        cur = model
        logs = []
        for tgt in targets:
            cur, lg = erase(cur, [tgt], cfg, steps, rng, teacher=model)
            logs.append(lg)
        return cur, logs
    if mode == "SE":
        out, lg = erase(model, targets, cfg, simultaneous_steps, rng, teacher=model)
        return out, [lg]
    raise ValueError(f"mode must be IE or SE, got {mode!r}")


def closest_token(weights: Sequence[np.ndarray], tokens: Sequence[np.ndarray]) -> np.ndarray:
    """argmin_e sum_W sum_j |W e - W x_j|^2 over all given projection matrices.

    The objective equals sum_j |S (e - x_j)|^2 for the stacked operator S, so
    any e with S e = S mean(x) is optimal; with full column rank the solution
    is unique and lstsq returns it.
    """
    xs = np.stack([np.asarray(x, dtype=np.float64) for x in tokens])
    if xs.shape[0] < 2:
        raise ValueError("need at least two tokens")
    s = np.concatenate([np.asarray(w, dtype=np.float64) for w in weights], axis=0)
    xbar = xs.mean(axis=0)
    if np.linalg.matrix_rank(s) < s.shape[1]:
        return xbar
    e, *_ = np.linalg.lstsq(s, s @ xbar, rcond=None)
    return e

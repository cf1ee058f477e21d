"""Toy text-to-image diffusion model.

A frozen token-embedding text encoder (one causal self-attention layer) feeds
a small denoiser made of M cross-attention blocks. Diffusion runs directly in
the concept feature space. Forward and backward passes are written out by
hand in float64; tests check every gradient against central differences.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import checkpoint
from .concept_world import ConceptSpec, sample_features
from .optim import Adam, check_finite, clip_global_norm

BOS = "<bos>"
EOT = "<eot>"
PLACEHOLDER = "<*>"
SPECIALS = (BOS, EOT, PLACEHOLDER)
TEMPLATE = ("a", "photo", "of")
EXTRA_WORDS = ("toy", "red", "blue", "small", "big", "old", "happy", "dark",
               "tree", "house", "car", "bird")
INIT_WORD = "toy"


class UnknownToken(KeyError):
    pass


@dataclass(frozen=True)
class ModelDims:
    d_text: int = 32
    layer_dims: tuple = (32, 32, 32)
    hidden: int = 32
    mlp: int = 64
    feature_dim: int = 12
    timesteps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.15
    max_len: int = 10

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims)


@dataclass(frozen=True)
class Prompt:
    tokens: tuple
    placeholder_position: Optional[int] = None

    def __len__(self) -> int:
        return len(self.tokens)


# ----------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @classmethod
    def linear(cls, timesteps: int, start: float, end: float) -> "NoiseSchedule":
        return cls(np.linspace(start, end, timesteps, dtype=np.float64))

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def q_sample(self, x0, t, eps):
        """z_t for 1-based timesteps `t`."""
        ab = self.alpha_bar[np.asarray(t) - 1]
        return np.sqrt(ab)[:, None] * x0 + np.sqrt(1.0 - ab)[:, None] * eps


# ----------------------------------------------------------------------------
# text encoder


@dataclass
class TextEncoder:
    vocab: list
    embeddings: np.ndarray
    pos: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.vocab)}

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def max_len(self) -> int:
        return self.pos.shape[0]

    def token_id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise UnknownToken(word) from None

    def embedding(self, word: str) -> np.ndarray:
        return self.embeddings[self.token_id(word)].copy()

    def word_ids(self) -> np.ndarray:
        """Ids of ordinary words, i.e. everything except the special tokens."""
        return np.array([i for i, w in enumerate(self.vocab) if w not in SPECIALS])

    def prompt(self, words: Sequence[str]) -> Prompt:
        """BOS + words + EOT. A PLACEHOLDER word marks the learnable slot."""
        toks = [self.token_id(BOS)] + [self.token_id(w) for w in words] + [self.token_id(EOT)]
        if len(toks) > self.max_len:
            raise ValueError(f"prompt length {len(toks)} exceeds max_len {self.max_len}")
        ph = None
        if PLACEHOLDER in words:
            ph = 1 + list(words).index(PLACEHOLDER)
        return Prompt(tuple(toks), ph)

    def concept_prompt(self, word: str) -> Prompt:
        return self.prompt(TEMPLATE + (word,))

    def placeholder_prompt(self) -> Prompt:
        return self.prompt(TEMPLATE + (PLACEHOLDER,))

    def embed(self, prompt: Prompt, placeholder=None, overrides: Optional[dict] = None) -> np.ndarray:
        x = self.embeddings[list(prompt.tokens)].copy()
        if prompt.placeholder_position is not None:
            if placeholder is None:
                raise ValueError("prompt has a placeholder but no embedding was given")
            x[prompt.placeholder_position] = placeholder
        for p, vec in (overrides or {}).items():
            x[p] = vec
        return x

    def forward(self, x_in: np.ndarray):
        """One causal self-attention layer with a residual connection."""
        L, d = x_in.shape
        x = x_in + self.pos[:L]
        q = x @ self.wq.T
        k = x @ self.wk.T
        v = x @ self.wv.T
        s = (q @ k.T) / np.sqrt(d)
        s = np.where(np.tril(np.ones((L, L), dtype=bool)), s, -np.inf)
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        o = a @ v
        h = x + o @ self.wo.T
        return h, (x, q, k, v, a, o)

    def backward(self, dh: np.ndarray, cache) -> np.ndarray:
        """Gradient w.r.t. the input embeddings (encoder weights stay frozen)."""
        x, q, k, v, a, o = cache
        d = x.shape[1]
        do = dh @ self.wo
        da = do @ v.T
        dv = a.T @ do
        ds = a * (da - (a * da).sum(axis=1, keepdims=True))
        ds /= np.sqrt(d)
        dq = ds @ k
        dk = ds.T @ q
        return dh + dq @ self.wq + dk @ self.wk + dv @ self.wv

    def encode(self, prompt: Prompt, placeholder=None, overrides=None) -> np.ndarray:
        return self.forward(self.embed(prompt, placeholder, overrides))[0]

    def tensors(self) -> dict:
        return {"enc/embeddings": self.embeddings, "enc/pos": self.pos, "enc/wq": self.wq,
                "enc/wk": self.wk, "enc/wv": self.wv, "enc/wo": self.wo}


def encode_prompt(enc: TextEncoder, prompt: Prompt, placeholder=None) -> np.ndarray:
    return enc.encode(prompt, placeholder)


def build_vocab(universe: Sequence[ConceptSpec]) -> list:
    words = list(SPECIALS) + list(TEMPLATE) + list(EXTRA_WORDS)
    words += [c.vocab_token for c in universe if c.vocab_token not in words]
    return words


def build_text_encoder(universe: Sequence[ConceptSpec], dims: ModelDims, seed: int,
                       child_parent_cos: float = 0.6, attn_gain: float = 0.5,
                       pos_scale: float = 0.3) -> TextEncoder:
    """Random frozen encoder. Narrow concept tokens sit close to their
    parent's token (cosine `child_parent_cos`), like a general term and its
    refinement in a real text-embedding space."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E47]))
    vocab = build_vocab(universe)
    d = dims.d_text
    emb = rng.standard_normal((len(vocab), d)) / np.sqrt(d)
    idx = {w: i for i, w in enumerate(vocab)}
    emb[idx[PLACEHOLDER]] = 0.0
    for c in universe:
        if c.parent_id is not None:
            p = emb[idx[c.parent_id]]
            r = rng.standard_normal(d)
            r -= (r @ p) / (p @ p) * p
            r /= np.linalg.norm(r)
            mix = child_parent_cos * p / np.linalg.norm(p) + np.sqrt(1 - child_parent_cos ** 2) * r
            emb[idx[c.vocab_token]] = mix * np.linalg.norm(p)
    pos = pos_scale * rng.standard_normal((dims.max_len, d)) / np.sqrt(d)
    w = [attn_gain * rng.standard_normal((d, d)) / np.sqrt(d) for _ in range(4)]
    return TextEncoder(vocab, emb, pos, *w)


# ----------------------------------------------------------------------------
# denoiser


def cross_attn_names(n_layers: int, kinds: Sequence[str] = ("k", "v")) -> list:
    return [f"blk{i}.w{kind}" for i in range(n_layers) for kind in kinds]


def init_denoiser(dims: ModelDims, rng: np.random.Generator) -> dict:
    H, F, D, dt = dims.hidden, dims.mlp, dims.feature_dim, dims.d_text
    n = rng.standard_normal
    p = {
        "in.w": n((H, D)) / np.sqrt(D),
        "in.b": np.zeros(H),
        "temb": 0.5 * n((dims.timesteps, H)),
        "out.w": n((D, H)) / np.sqrt(H),
        "out.b": np.zeros(D),
    }
    for i, dl in enumerate(dims.layer_dims):
        p[f"blk{i}.wq"] = n((dl, H)) / np.sqrt(H)
        p[f"blk{i}.wk"] = n((dl, dt)) / np.sqrt(dt)
        p[f"blk{i}.wv"] = n((dl, dt)) / np.sqrt(dt)
        p[f"blk{i}.wo"] = n((H, dl)) / np.sqrt(dl)
        p[f"blk{i}.w1"] = n((F, H)) / np.sqrt(H)
        p[f"blk{i}.b1"] = np.zeros(F)
        p[f"blk{i}.w2"] = 0.5 * n((H, F)) / np.sqrt(F)
        p[f"blk{i}.b2"] = np.zeros(H)
    return p


def denoiser_forward(params: dict, n_layers: int, z, t, cond):
    """Predicted noise for latents z (B, D) at 1-based steps t (B,).

    cond is (L, d_text) shared by the batch or (B, L, d_text).
    """
    z = np.asarray(z, dtype=np.float64)
    B = z.shape[0]
    t = np.asarray(t)
    shared = cond.ndim == 2
    h = z @ params["in.w"].T + params["in.b"] + params["temb"][t - 1]
    caches = []
    for i in range(n_layers):
        wq, wk, wv = params[f"blk{i}.wq"], params[f"blk{i}.wk"], params[f"blk{i}.wv"]
        scale = 1.0 / np.sqrt(wq.shape[0])
        q = h @ wq.T
        if shared:
            K = cond @ wk.T
            V = cond @ wv.T
            s = (q @ K.T) * scale
        else:
            K = cond @ wk.T
            V = cond @ wv.T
            s = np.einsum("bld,bd->bl", K, q) * scale
        s = s - s.max(axis=1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=1, keepdims=True)
        o = a @ V if shared else np.einsum("bl,bld->bd", a, V)
        h1 = h + o @ params[f"blk{i}.wo"].T
        g = np.tanh(h1 @ params[f"blk{i}.w1"].T + params[f"blk{i}.b1"])
        h2 = h1 + g @ params[f"blk{i}.w2"].T + params[f"blk{i}.b2"]
        caches.append((h, q, K, V, a, o, h1, g, scale))
        h = h2
    out = h @ params["out.w"].T + params["out.b"]
    return out, (z, t, cond, shared, caches, h, B)


def denoiser_backward(params: dict, n_layers: int, cache, dout, want_params: bool = True,
                      want_cond: bool = True):
    """Returns (param_grads or None, dcond or None); dcond has cond's shape."""
    z, t, cond, shared, caches, h_last, B = cache
    grads = {} if want_params else None
    if want_params:
        grads["out.w"] = dout.T @ h_last
        grads["out.b"] = dout.sum(0)
    dh = dout @ params["out.w"]
    dcond = np.zeros_like(cond) if want_cond else None
    for i in reversed(range(n_layers)):
        h, q, K, V, a, o, h1, g, scale = caches[i]
        w2, w1, wo = params[f"blk{i}.w2"], params[f"blk{i}.w1"], params[f"blk{i}.wo"]
        wq, wk, wv = params[f"blk{i}.wq"], params[f"blk{i}.wk"], params[f"blk{i}.wv"]
        dg = dh @ w2
        du = dg * (1.0 - g * g)
        dh1 = dh + du @ w1
        do = dh1 @ wo
        if shared:
            dV = a.T @ do
            da = do @ V.T
        else:
            dV = np.einsum("bl,bd->bld", a, do)
            da = np.einsum("bld,bd->bl", V, do)
        ds = a * (da - (a * da).sum(axis=1, keepdims=True)) * scale
        if shared:
            dK = ds.T @ q
            dq = ds @ K
        else:
            dK = np.einsum("bl,bd->bld", ds, q)
            dq = np.einsum("bl,bld->bd", ds, K)
        if want_params:
            grads[f"blk{i}.b2"] = dh.sum(0)
            grads[f"blk{i}.w2"] = dh.T @ g
            grads[f"blk{i}.b1"] = du.sum(0)
            grads[f"blk{i}.w1"] = du.T @ h1
            grads[f"blk{i}.wo"] = dh1.T @ o
            grads[f"blk{i}.wq"] = dq.T @ h
            if shared:
                grads[f"blk{i}.wk"] = dK.T @ cond
                grads[f"blk{i}.wv"] = dV.T @ cond
            else:
                grads[f"blk{i}.wk"] = np.einsum("bld,ble->de", dK, cond)
                grads[f"blk{i}.wv"] = np.einsum("bld,ble->de", dV, cond)
        if want_cond:
            dcond += dK @ wk + dV @ wv
        dh = dh1 + dq @ wq
    if want_params:
        grads["in.w"] = dh.T @ z
        grads["in.b"] = dh.sum(0)
        dtemb = np.zeros_like(params["temb"])
        np.add.at(dtemb, t - 1, dh)
        grads["temb"] = dtemb
    return grads, dcond


def mse_loss(pred, target):
    """mean over the batch of the squared L2 error; returns (loss, dpred)."""
    diff = pred - target
    B = diff.shape[0]
    return float(np.sum(diff * diff) / B), 2.0 * diff / B


# ----------------------------------------------------------------------------
# model bundle


@dataclass
class ToyT2I:
    dims: ModelDims
    encoder: TextEncoder
    params: dict
    schedule: NoiseSchedule

    @property
    def n_layers(self) -> int:
        return self.dims.n_layers

    def copy(self) -> "ToyT2I":
        return ToyT2I(self.dims, self.encoder, {k: v.copy() for k, v in self.params.items()},
                      self.schedule)

    def with_params(self, updates: dict) -> "ToyT2I":
        m = self.copy()
        for k, v in updates.items():
            m.params[k] = np.array(v, dtype=np.float64)
        return m

    def cross_attn(self, kinds=("k", "v")) -> dict:
        return {k: self.params[k].copy() for k in cross_attn_names(self.n_layers, kinds)}

    def layer_weight(self, layer: int, kind: str) -> np.ndarray:
        return self.params[f"blk{layer}.w{kind}"]

    def forward(self, z, t, cond):
        return denoiser_forward(self.params, self.n_layers, z, t, cond)

    def backward(self, cache, dout, want_params=True, want_cond=True):
        return denoiser_backward(self.params, self.n_layers, cache, dout, want_params, want_cond)

    def cond(self, prompt: Prompt, placeholder=None, overrides=None) -> np.ndarray:
        return self.encoder.encode(prompt, placeholder, overrides)

    def concept_cond(self, word: str) -> np.ndarray:
        return self.cond(self.encoder.concept_prompt(word))

    def tensors(self) -> dict:
        out = dict(self.encoder.tensors())
        out.update({f"den/{k}": v for k, v in self.params.items()})
        return out

    def fingerprint(self) -> str:
        return checkpoint.fingerprint(self.tensors())

    def save(self, path) -> str:
        return checkpoint.save(path, self.tensors())


def build_model(universe: Sequence[ConceptSpec], dims: ModelDims = ModelDims(),
                seed: int = 0, **encoder_kw) -> ToyT2I:
    enc = build_text_encoder(universe, dims, seed, **encoder_kw)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDE70]))
    params = init_denoiser(dims, rng)
    sched = NoiseSchedule.linear(dims.timesteps, dims.beta_start, dims.beta_end)
    return ToyT2I(dims, enc, params, sched)


def model_from_tensors(tensors: dict, universe: Sequence[ConceptSpec],
                       dims: ModelDims = ModelDims()) -> ToyT2I:
    enc = TextEncoder(build_vocab(universe), tensors["enc/embeddings"], tensors["enc/pos"],
                      tensors["enc/wq"], tensors["enc/wk"], tensors["enc/wv"], tensors["enc/wo"])
    params = {k[4:]: v for k, v in tensors.items() if k.startswith("den/")}
    sched = NoiseSchedule.linear(dims.timesteps, dims.beta_start, dims.beta_end)
    return ToyT2I(dims, enc, params, sched)


def load_model(path, universe, dims: ModelDims = ModelDims()) -> ToyT2I:
    return model_from_tensors(checkpoint.load(path), universe, dims)


def predict_noise(model: ToyT2I, z_t, cond, t) -> np.ndarray:
    z_t = np.atleast_2d(z_t)
    t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
    return model.forward(z_t, t, cond)[0]


def denoising_batch(model: ToyT2I, x0: np.ndarray, rng: np.random.Generator):
    """Random (z_t, t, eps) for clean features x0."""
    B = x0.shape[0]
    t = rng.integers(1, model.schedule.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    return model.schedule.q_sample(x0, t, eps), t, eps


def denoising_loss(model: ToyT2I, z_t, t, eps, cond, want_params=True, want_cond=True):
    """|eps - Phi(z_t, cond, t)|^2 averaged over the batch, with gradients."""
    pred, cache = model.forward(z_t, t, cond)
    loss, dpred = mse_loss(pred, eps)
    grads, dcond = model.backward(cache, dpred, want_params, want_cond)
    return loss, grads, dcond


# ----------------------------------------------------------------------------
# training and sampling


def pretrain(model: ToyT2I, universe: Sequence[ConceptSpec], steps: int,
             rng: np.random.Generator, batch: int = 64, lr: float = 3e-3,
             lr_final: float = 3e-4, clip: float | None = 5.0,
             generic_words: Sequence[str] = EXTRA_WORDS, generic_scale: float = 1.0,
             generic_frac: float = 0.2):
    """Denoising score matching over 'a photo of <concept>' prompts.

    Prompts built from `generic_words` are trained on a featureless background
    blob N(0, generic_scale^2 I) and drawn with total probability
    `generic_frac`, so words outside the concept table have a neutral meaning.
    Returns (trained copy, per-step losses). Only denoiser weights train; the
    text encoder is frozen.
    """
    model = model.copy()
    losses = np.zeros(max(steps, 0))
    if steps <= 0:
        return model, losses
    words = [c.vocab_token for c in universe] + list(generic_words)
    conds = np.stack([model.concept_cond(w) for w in words])
    D = model.dims.feature_dim
    means = np.concatenate([np.stack([c.mean for c in universe]),
                            np.zeros((len(generic_words), D))])
    scales = np.array([c.covariance_scale for c in universe] + [generic_scale] * len(generic_words))
    n_c = len(universe)
    probs = np.full(len(words), (1.0 - generic_frac) / n_c)
    if generic_words:
        probs[n_c:] = generic_frac / len(generic_words)
    else:
        probs = np.full(n_c, 1.0 / n_c)
    opt = Adam(lr)
    for step in range(steps):
        idx = rng.choice(len(words), size=batch, p=probs)
        x0 = means[idx] + scales[idx, None] * rng.standard_normal((batch, means.shape[1]))
        z_t, t, eps = denoising_batch(model, x0, rng)
        loss, grads, _ = denoising_loss(model, z_t, t, eps, conds[idx], want_cond=False)
        check_finite(loss, "pretrain", step)
        clip_global_norm(grads, clip)
        frac = step / max(steps - 1, 1)
        cur = lr_final + 0.5 * (lr - lr_final) * (1 + np.cos(np.pi * frac))
        opt.step(model.params, grads, lr=cur)
        losses[step] = loss
    return model, losses


def item_noise(seed: int, n: int, T: int, D: int, offset: int = 0) -> np.ndarray:
    """Per-item noise streams: item i draws from SeedSequence([seed, i])."""
    out = np.empty((n, T + 1, D))
    for i in range(n):
        g = np.random.default_rng(np.random.SeedSequence([seed & (2 ** 63 - 1), offset + i]))
        out[i] = g.standard_normal((T + 1, D))
    return out


def sample_cond(model: ToyT2I, cond: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Ancestral DDPM sampling from pure noise; (n, D) features."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sch = model.schedule
    T, D = sch.T, model.dims.feature_dim
    noise = item_noise(seed, n, T, D)
    betas, alphas, ab = sch.betas, sch.alphas, sch.alpha_bar
    x = noise[:, 0]
    for t in range(T, 0, -1):
        eps = model.forward(x, np.full(n, t), cond)[0]
        mean = (x - betas[t - 1] / np.sqrt(1.0 - ab[t - 1]) * eps) / np.sqrt(alphas[t - 1])
        if t > 1:
            var = betas[t - 1] * (1.0 - ab[t - 2]) / (1.0 - ab[t - 1])
            x = mean + np.sqrt(var) * noise[:, T - t + 1]
        else:
            x = mean
    return x


def sample(model: ToyT2I, prompt: Prompt, n: int, seed: int, placeholder=None) -> np.ndarray:
    return sample_cond(model, model.cond(prompt, placeholder), n, seed)


def concept_accuracy(model: ToyT2I, universe: Sequence[ConceptSpec], classifier,
                     n: int = 200, seed: int = 0) -> dict:
    """Per-concept fraction of textual-prompt samples classified correctly."""
    out = {}
    for j, c in enumerate(universe):
        x = sample_cond(model, model.concept_cond(c.vocab_token), n, seed + 7919 * j)
        out[c.id] = float(np.mean(classifier.predict(x) == c.id))
    return out


def training_images(concept: ConceptSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    return sample_features(concept, n, rng)

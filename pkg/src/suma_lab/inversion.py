"""Textual inversion: fit one placeholder embedding so a frozen model
regenerates a set of concept images. Every `checkpoint_stride` steps the
embedding is stored, so early and final tokens can both be read back."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .optim import Adam, check_finite
from .toy_t2i import INIT_WORD, ToyT2I, denoising_batch, mse_loss


class EmptyImageSet(ValueError):
    pass


class MissingCheckpoint(KeyError):
    pass


@dataclass
class TiTrajectory:
    checkpoints: dict
    target_concept: str
    model_fingerprint: str
    losses: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def final_step(self) -> int:
        return max(self.checkpoints)

    @property
    def steps(self) -> list:
        return sorted(self.checkpoints)

    def token_at(self, step: int) -> np.ndarray:
        try:
            return self.checkpoints[step].copy()
        except KeyError:
            raise MissingCheckpoint(
                f"step {step} not recorded for {self.target_concept!r}; have {self.steps[:5]}..."
            ) from None

    def final(self) -> np.ndarray:
        return self.token_at(self.final_step)

    def tensors(self) -> dict:
        return {f"ti/{self.target_concept}/{s}": v for s, v in sorted(self.checkpoints.items())}

    def save(self, path) -> str:
        return checkpoint.save(path, self.tensors())

    @classmethod
    def from_tensors(cls, tensors: dict, concept: str, model_fingerprint: str = "") -> "TiTrajectory":
        prefix = f"ti/{concept}/"
        cps = {int(k[len(prefix):]): v.copy() for k, v in tensors.items() if k.startswith(prefix)}
        if not cps:
            raise MissingCheckpoint(f"no trajectory for {concept!r}")
        return cls(cps, concept, model_fingerprint)


def token_at(traj: TiTrajectory, step: int) -> np.ndarray:
    return traj.token_at(step)


def ti_loss_and_grad(model: ToyT2I, e: np.ndarray, z_t, t, eps):
    """Denoising loss of 'a photo of <e>' and its gradient w.r.t. e."""
    enc = model.encoder
    prompt = enc.placeholder_prompt()
    cond, ecache = enc.forward(enc.embed(prompt, e))
    pred, cache = model.forward(z_t, t, cond)
    loss, dpred = mse_loss(pred, eps)
    _, dcond = model.backward(cache, dpred, want_params=False)
    dx = enc.backward(dcond, ecache)
    return loss, dx[prompt.placeholder_position]


def run_ti(model: ToyT2I, images: np.ndarray, steps: int, lr: float,
           rng: np.random.Generator, init_token: str | np.ndarray = INIT_WORD,
           batch: int = 16, checkpoint_stride: int = 10,
           target_concept: str = "") -> TiTrajectory:
    """Adam on the placeholder embedding only; model weights are never touched."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2 or images.shape[0] == 0:
        raise EmptyImageSet("need at least one image")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(init_token, str):
        e = model.encoder.embedding(init_token)
    else:
        e = np.array(init_token, dtype=np.float64)
    params = {"e": e}
    opt = Adam(lr)
    cps = {0: e.copy()}
    losses = np.zeros(steps)
    for step in range(1, steps + 1):
        x0 = images[rng.integers(0, images.shape[0], size=batch)]
        z_t, t, eps = denoising_batch(model, x0, rng)
        loss, g = ti_loss_and_grad(model, params["e"], z_t, t, eps)
        check_finite(loss, "textual inversion", step)
        opt.step(params, {"e": g})
        losses[step - 1] = loss
        if step % checkpoint_stride == 0 or step == steps:
            cps[step] = params["e"].copy()
    return TiTrajectory(cps, target_concept, model.fingerprint(), losses)

import numpy as np
import pytest

from oracles import central_diff, check_directional, check_grad, rel_err
from suma_lab.toy_t2i import (PLACEHOLDER, ModelDims, NoiseSchedule, UnknownToken, build_model,
                              denoising_batch, denoising_loss, item_noise, load_model, mse_loss,
                              sample, sample_cond)


def _batch(model, rng, B=5):
    x0 = rng.standard_normal((B, model.dims.feature_dim)) * 3
    return denoising_batch(model, x0, rng)


@pytest.mark.parametrize("point", range(10))
def test_param_grads_shared_cond(small_model, point):
    rng = np.random.default_rng(point)
    m = small_model.copy()
    for v in m.params.values():
        v += 0.3 * rng.standard_normal(v.shape)
    z, t, eps = _batch(m, rng)
    cond = m.concept_cond("springer")
    _, grads, dcond = denoising_loss(m, z, t, eps, cond)
    f = lambda: denoising_loss(m, z, t, eps, cond, False, False)[0]
    grads = {k: g for k, g in grads.items() if k != "temb"}
    assert check_grad(f, m.params, grads, rng) < 1e-4
    assert check_directional(f, cond, dcond, rng) < 1e-4


@pytest.mark.parametrize("point", range(10))
def test_grads_batched_cond(small_model, point):
    rng = np.random.default_rng(100 + point)
    m = small_model.copy()
    z, t, eps = _batch(m, rng, B=4)
    cond = rng.standard_normal((4, 5, m.dims.d_text))
    _, grads, dcond = denoising_loss(m, z, t, eps, cond)
    f = lambda: denoising_loss(m, z, t, eps, cond, False, False)[0]
    names = [k for k in grads if "wk" in k or "wv" in k]
    assert check_grad(f, m.params, {k: grads[k] for k in names}, rng) < 1e-4
    assert check_directional(f, cond, dcond, rng) < 1e-4


def test_temb_grad(small_model):
    rng = np.random.default_rng(7)
    m = small_model.copy()
    z, t, eps = _batch(m, rng)
    cond = m.concept_cond("dog")
    _, grads, _ = denoising_loss(m, z, t, eps, cond)
    f = lambda: denoising_loss(m, z, t, eps, cond, False, False)[0]
    idx = [(int(r) - 1, j) for r in t for j in range(3)]
    fd = [central_diff(f, m.params["temb"], i) for i in idx]
    assert rel_err(fd, [grads["temb"][i] for i in idx]) < 1e-4
    unused = sorted(set(range(m.dims.timesteps)) - {int(r) - 1 for r in t})
    assert np.all(grads["temb"][unused] == 0)


@pytest.mark.parametrize("point", range(10))
def test_encoder_backward(small_model, point):
    rng = np.random.default_rng(200 + point)
    enc = small_model.encoder
    x = enc.embed(enc.concept_prompt("elon"))
    x += 0.5 * rng.standard_normal(x.shape)
    w = rng.standard_normal(x.shape)
    h, cache = enc.forward(x)
    dx = enc.backward(w, cache)
    f = lambda: float(np.sum(w * enc.forward(x)[0]))
    assert check_directional(f, x, dx, rng) < 1e-4


def test_mse():
    loss, d = mse_loss(np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]]))
    assert loss == 5.0 and np.allclose(d, [[2.0, 4.0]])


def test_schedule():
    s = NoiseSchedule.linear(ModelDims().timesteps, ModelDims().beta_start, ModelDims().beta_end)
    ab = s.alpha_bar
    assert ab[-1] < 0.05
    assert np.all(np.diff(ab) < 0)
    rng = np.random.default_rng(0)
    x0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    z = s.q_sample(x0, np.array([1, 1, 1]), eps)
    assert np.allclose(z, np.sqrt(ab[0]) * x0 + np.sqrt(1 - ab[0]) * eps)


def test_sampling_is_deterministic_and_per_item(small_model):
    c = small_model.concept_cond("dog")
    a = sample_cond(small_model, c, 6, seed=11)
    assert np.array_equal(a, sample_cond(small_model, c, 6, seed=11))
    # item i only depends on (seed, i): a smaller batch is a prefix
    assert np.allclose(sample_cond(small_model, c, 3, seed=11), a[:3])
    assert not np.allclose(sample_cond(small_model, c, 3, seed=12), a[:3])
    n = item_noise(5, 4, 10, 3)
    assert np.array_equal(n[2:], item_noise(5, 2, 10, 3, offset=2))
    with pytest.raises(ValueError):
        sample_cond(small_model, c, 0, 0)


def test_prompts(small_model):
    enc = small_model.encoder
    p = enc.placeholder_prompt()
    assert p.placeholder_position == 4 and len(p) == 6
    with pytest.raises(UnknownToken):
        enc.prompt(["nonexistent"])
    with pytest.raises(ValueError):
        enc.prompt(["a"] * 20)
    with pytest.raises(ValueError):
        enc.embed(p)
    e = np.ones(enc.d)
    assert np.array_equal(enc.embed(p, e)[4], e)
    assert PLACEHOLDER in enc.vocab
    x = sample(small_model, p, 2, 0, placeholder=enc.embedding("dog"))
    assert np.allclose(x, sample_cond(small_model, small_model.concept_cond("dog"), 2, 0))


def test_save_load(tmp_path, small_model, universe, small_dims):
    small_model.save(tmp_path / "m.suma")
    back = load_model(tmp_path / "m.suma", universe, small_dims)
    assert back.fingerprint() == small_model.fingerprint()
    assert np.array_equal(back.encoder.embeddings, small_model.encoder.embeddings)


def test_model_seeds(universe, small_dims):
    a = build_model(universe, small_dims, seed=1)
    assert a.fingerprint() == build_model(universe, small_dims, seed=1).fingerprint()
    assert a.fingerprint() != build_model(universe, small_dims, seed=2).fingerprint()

import numpy as np
import pytest

from oracles import check_grad
from suma_lab.concept_world import sample_features
from suma_lab.erasure import (ErasureConfig, SubspacePair, ca_loss, closest_token, erase,
                              erase_ca, erase_multi, elimination_losses, make_target, push_loss,
                              textual_task)
from suma_lab.toy_t2i import cross_attn_names, denoising_batch


def _pair(model, rng, l=2):
    d = model.dims.d_text
    us = [rng.standard_normal(d) for _ in range(l)]
    vs = [rng.standard_normal(d) for _ in range(l)]
    return SubspacePair.build(model, "springer", "dog", us, vs)


def _jiggle(model, rng, scale=0.3):
    m = model.copy()
    for k in cross_attn_names(m.n_layers):
        m.params[k] += scale * rng.standard_normal(m.params[k].shape)
    return m


@pytest.mark.parametrize("point", range(10))
@pytest.mark.parametrize("literal", [False, True])
def test_ca_grad(small_model, ids, point, literal):
    rng = np.random.default_rng(point)
    student = _jiggle(small_model, rng)
    z, t, _ = denoising_batch(small_model, sample_features(ids["springer"], 5, rng), rng)
    tc, ac = small_model.concept_cond("springer"), small_model.concept_cond("dog")
    _, g = ca_loss(student, small_model, tc, ac, z, t, literal=literal)
    f = lambda: ca_loss(student, small_model, tc, ac, z, t, literal=literal)[0]
    assert check_grad(f, student.params, g, rng) < 1e-4


@pytest.mark.parametrize("point", range(10))
def test_elimination_grads(small_model, point):
    rng = np.random.default_rng(50 + point)
    pair = _pair(small_model, rng)
    m = _jiggle(small_model, rng)
    lam = float(rng.uniform(0, 2))
    *_, g = elimination_losses(m.params, pair, lam)
    f = lambda: elimination_losses(m.params, pair, lam)[2]
    assert check_grad(f, m.params, g, rng) < 1e-4


@pytest.mark.parametrize("point", range(10))
def test_push_grad(small_model, point):
    rng = np.random.default_rng(80 + point)
    pair = _pair(small_model, rng)
    m = _jiggle(small_model, rng)
    tau = 1e6  # hinge active
    loss, g = push_loss(m.params, pair, tau)
    assert loss > 0
    f = lambda: push_loss(m.params, pair, tau)[0]
    assert check_grad(f, m.params, g, rng) < 1e-4
    loss, g = push_loss(m.params, pair, 0.0)
    assert loss == 0.0 and all(np.all(v == 0) for v in g.values())


def test_elimination_loss_values(small_model):
    rng = np.random.default_rng(0)
    pair = _pair(small_model, rng)
    # reference tokens lie in their own span at construction
    l_proj, l_reg, _, _ = elimination_losses(small_model.params, pair)
    assert l_reg == pytest.approx(0.0, abs=1e-9)
    assert l_proj > 0
    # u = v gives zero projection loss too
    same = SubspacePair.build(small_model, "a", "b", pair.tokens_v, pair.tokens_v)
    assert elimination_losses(small_model.params, same)[0] == pytest.approx(0.0, abs=1e-9)


def test_zero_steps_and_only_cross_attn_changes(small_model, ids):
    rng = np.random.default_rng(0)
    imgs = sample_features(ids["springer"], 8, rng)
    cfg = ErasureConfig(ca_steps=0, batch=4)
    tgt = make_target(small_model, ids["springer"], ids["dog"], imgs, _pair(small_model, rng), cfg)
    out, log = erase(small_model, [tgt], cfg, 0, rng)
    assert out.fingerprint() == small_model.fingerprint() and log.rows == []
    out, log = erase(small_model, [tgt], cfg, 5, rng)
    names = set(cross_attn_names(small_model.n_layers))
    for k, v in out.params.items():
        assert np.array_equal(v, small_model.params[k]) == (k not in names)
    assert log.to_csv().splitlines()[0] == "step,L_CA,L_proj,L_reg,L_final"
    assert len(log.rows) == 5


def test_erase_ca_kinds(small_model, ids):
    rng = np.random.default_rng(0)
    imgs = sample_features(ids["springer"], 8, rng)
    task = textual_task(small_model, ids["springer"], ids["dog"], imgs)
    out = erase_ca(small_model, [task], 3, 1e-2, rng, kinds=("v",), batch=4)
    for k in cross_attn_names(small_model.n_layers, ("k",)):
        assert np.array_equal(out.params[k], small_model.params[k])
    for k in cross_attn_names(small_model.n_layers, ("v",)):
        assert not np.array_equal(out.params[k], small_model.params[k])


def test_multi(small_model, ids):
    rng = np.random.default_rng(0)
    cfg = ErasureConfig(batch=4)
    tg = [make_target(small_model, ids[c], ids[ids[c].parent_id],
                      sample_features(ids[c], 6, rng), _pair(small_model, rng), cfg)
          for c in ("springer", "elon")]
    m, logs = erase_multi(small_model, tg, "IE", cfg, 3, rng)
    assert len(logs) == 2
    m, logs = erase_multi(small_model, tg, "SE", cfg, 3, rng, simultaneous_steps=4)
    assert len(logs) == 1 and len(logs[0].rows) == 4
    with pytest.raises(ValueError):
        erase_multi(small_model, tg, "XX", cfg, 3, rng)
    with pytest.raises(ValueError):
        erase_multi(small_model, [], "IE", cfg, 3, rng)


def test_truncated(small_model):
    pair = _pair(small_model, np.random.default_rng(0), l=3)
    t = pair.truncated(2)
    assert t.l == 2
    for key, sub in t.reference.items():
        assert sub.basis.shape[1] == 2
        assert np.allclose(sub.basis, pair.reference[key].basis[:, :2])


def test_config_validation():
    for bad in (dict(l=0), dict(lambda_reg=-1), dict(mode="nope"), dict(elimination_steps=0)):
        with pytest.raises(ValueError):
            ErasureConfig(**bad)


def test_closest_token():
    rng = np.random.default_rng(0)
    ws = [rng.standard_normal((6, 4)) for _ in range(2)]
    xs = [rng.standard_normal(4) for _ in range(3)]
    e = closest_token(ws, xs)
    obj = lambda e: sum(np.sum((w @ e - w @ x) ** 2) for w in ws for x in xs)
    # brute force check: random perturbations never improve
    assert all(obj(e) <= obj(e + 1e-3 * rng.standard_normal(4)) for _ in range(200))
    assert np.allclose(e, np.mean(xs, axis=0))
    with pytest.raises(ValueError):
        closest_token(ws, xs[:1])
    # rank-deficient operator: mean is still optimal
    low = [np.outer(rng.standard_normal(6), rng.standard_normal(4))]
    e = closest_token(low, xs)
    assert np.allclose(e, np.mean(xs, axis=0))


def test_push_with_zero_margin_is_ca(small_model, ids):
    imgs = sample_features(ids["springer"], 8, np.random.default_rng(0))
    pair = _pair(small_model, np.random.default_rng(1))
    outs = []
    for mode, tau in (("push", 0.0), ("ca_only", None)):
        cfg = ErasureConfig(batch=4, mode=mode, tau=tau)
        tgt = make_target(small_model, ids["springer"], ids["dog"], imgs, pair, cfg)
        outs.append(erase(small_model, [tgt], cfg, 4, np.random.default_rng(2))[0])
    assert outs[0].fingerprint() == outs[1].fingerprint()

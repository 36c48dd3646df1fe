from __future__ import annotations

import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coefflow import nn
from coefflow.cfm import (
    CfmConfig, ConditionNormalizer, FlowModel, FlowPathRecord, VectorFieldNet, adaln_modulate, cfm_loss,
    euler_flow, generate_forecaster, generate_latent, sample_path_point, sinusoidal_embedding, target_velocity,
    train_cfm,
)
from coefflow.dynamics import ConfigError, NumericError
from coefflow.tokenizer import WeightSchema, describe_layer
from coefflow.vae import LatentCode, VaeConfig, WeightVAE

SMALL = CfmConfig(d_model=8, layers=1, heads=2, dropout=0.0)
ONE = WeightSchema((describe_layer(0, "t", "norm_affine", (1,)),))


def _model(n_tokens=2, d_z=3, cond_dim=1, cfg=SMALL, seed=0):
    net = VectorFieldNet(n_tokens, d_z, cond_dim, cfg, seed)
    norm = ConditionNormalizer(tuple(f"c{i}" for i in range(cond_dim)), (0.0,) * cond_dim, (1.0,) * cond_dim)
    return FlowModel(net, norm, np.zeros((n_tokens, d_z)), np.ones((n_tokens, d_z)))


@given(seed=st.integers(0, 10_000), t=st.floats(0, 1))
def test_path_endpoints_and_velocity(seed, t):
    r = np.random.default_rng(seed)
    z0, z1 = r.standard_normal((2, 3)), r.standard_normal((2, 3))
    assert np.array_equal(sample_path_point(z0, z1, 0.0), z0)
    assert np.array_equal(sample_path_point(z0, z1, 1.0), z1)
    zt = sample_path_point(z0, z1, t)
    np.testing.assert_allclose(zt, z0 + t * (z1 - z0), atol=1e-12)
    assert np.array_equal(target_velocity(z0, z1), z1 - z0)


def test_path_errors_and_examples():
    np.testing.assert_array_equal(sample_path_point(np.zeros(2), np.full(2, 2.0), 0.5), [1.0, 1.0])
    with pytest.raises(ValueError):
        sample_path_point(np.zeros(2), np.zeros(2), 1.5)
    with pytest.raises(ValueError):
        sample_path_point(np.zeros(2), np.zeros(3), 0.5)


def test_sinusoidal_embedding():
    e = sinusoidal_embedding([0.0, 0.5], 128)
    assert e.shape == (2, 128)
    np.testing.assert_array_equal(e[0, :64], 0.0)
    np.testing.assert_array_equal(e[0, 64:], 1.0)
    assert e[1, 0] == pytest.approx(np.sin(0.5))


def test_adaln_identity_at_init(rng):
    net = VectorFieldNet(3, 2, 1, CfmConfig(d_model=8, layers=2, heads=2), 0)
    cond = net.embed_condition(rng.random((2, 1)), rng.random(2))
    h = rng.standard_normal((2, 3, 8))
    for b in range(2):
        gamma, beta = net.modulation(cond, b)
        np.testing.assert_array_equal(gamma.data, 1.0)
        np.testing.assert_array_equal(beta.data, 0.0)
        np.testing.assert_array_equal(adaln_modulate(h, gamma, beta).data, nn.layer_norm(h).data)


def test_adaln_scale_shift(rng):
    h = rng.standard_normal((1, 2, 4))
    g, b = np.full((1, 4), 2.0), np.full((1, 4), 0.5)
    np.testing.assert_allclose(adaln_modulate(h, g, b).data, 2.0 * nn.layer_norm(h).data + 0.5, rtol=1e-14)


def test_field_shapes_and_zero_head(rng):
    net = VectorFieldNet(2, 3, 1, SMALL, 0)
    z = rng.standard_normal((4, 2, 3))
    assert net.forward(z, rng.random(4), rng.random((4, 1))).shape == z.shape
    net.params["head.weight"].data[:] = 0.0
    net.params["head.bias"].data[:] = 0.0
    np.testing.assert_array_equal(net(z, 0.3, [[0.5]]), 0.0)
    with pytest.raises(ValueError):
        net(np.zeros((1, 3, 3)), 0.0, [[0.0]])


def test_dropout_determinism(rng):
    net = VectorFieldNet(2, 3, 1, CfmConfig(d_model=8, layers=1, heads=2, dropout=0.3), 0)
    z = rng.standard_normal((2, 2, 3))
    a = net.forward(z, 0.5, [[0.1]], training=True, rng=np.random.default_rng(5)).data
    b = net.forward(z, 0.5, [[0.1]], training=True, rng=np.random.default_rng(5)).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(net(z, 0.5, [[0.1]]), net(z, 0.5, [[0.1]]))


def test_cfm_loss_gradient_check(rng):
    net = VectorFieldNet(2, 2, 1, CfmConfig(d_model=8, layers=1, heads=2, dropout=0.0), 1)
    z1, e = rng.standard_normal((3, 2, 2)), rng.random((3, 1))
    err = nn.grad_check(lambda: cfm_loss(net, z1, e, np.random.default_rng(7)), net.params.tensors())
    assert err < 1e-4


def test_cfm_loss_nonnegative_and_errors(rng):
    net = VectorFieldNet(2, 2, 1, SMALL, 0)
    assert cfm_loss(net, rng.standard_normal((3, 2, 2)), rng.random((3, 1)), rng).item() >= 0.0
    with pytest.raises(ValueError):
        cfm_loss(net, np.zeros((0, 2, 2)), np.zeros((0, 1)), rng)


def test_euler_zero_and_constant_fields(rng):
    z0 = rng.standard_normal((4, 3))
    zn, path = euler_flow(lambda z, t: np.zeros_like(z), z0, 17)
    assert np.array_equal(zn, z0) and len(path) == 18
    c = rng.standard_normal((4, 3))
    ends = [euler_flow(lambda z, t: c, z0, n, record=False)[0] for n in (1, 10, 100, 1000)]
    for e in ends:
        np.testing.assert_allclose(e, z0 + c, rtol=0, atol=1e-12)
    with pytest.raises(NumericError, match="step 1"):
        euler_flow(lambda z, t: np.full_like(z, np.inf), z0, 5)
    with pytest.raises(ValueError):
        euler_flow(lambda z, t: z, z0, 0)


def test_normalizer(recwarn):
    n = ConditionNormalizer.from_ranges({"beta": (0.02, 0.02), "gamma": (0.2, 1.0)}, ["beta", "gamma"])
    np.testing.assert_allclose(n([0.02, 0.6]), [[0.0, 0.5]])
    np.testing.assert_allclose(n([0.02, 1.0]), [[0.0, 1.0]])
    with pytest.warns(UserWarning, match="clamped"):
        np.testing.assert_allclose(n([0.02, 5.0]), [[0.0, 1.5]])
    assert ConditionNormalizer.from_dict(n.as_dict()) == n
    with pytest.raises(ValueError):
        n([0.1])


def _affine_corpus():
    es = np.round(np.arange(11) * 0.1, 10)
    return [LatentCode(np.array([[2 * e - 1]]), ONE, np.array([e])) for e in es]


def test_single_point_smoke():
    codes = [LatentCode(np.array([[0.7]]), ONE, np.array([0.5]))] * 2
    # 2000 single-batch epochs are 2000 optimizer steps
    cfg = CfmConfig(d_model=32, layers=1, heads=1, dropout=0.0, epochs=2000, lr=3e-3, batch=2)
    res = train_cfm(codes, ConditionNormalizer(("e",), (0.0,), (1.0,)), cfg, 0)
    assert np.mean(res.losses[-100:]) < 0.05


def test_training_determinism_and_metadata(tmp_path):
    norm = ConditionNormalizer(("e",), (0.0,), (1.0,))
    cfg = CfmConfig(d_model=16, layers=1, heads=1, dropout=0.1, epochs=200, lr=3e-3, batch=11, repeats=4)
    a = train_cfm(_affine_corpus(), norm, cfg, 2)
    b = train_cfm(_affine_corpus(), norm, cfg, 2)
    np.testing.assert_array_equal(a.model.net.params.flat(), b.model.net.params.flat())
    assert np.mean(a.losses[-20:]) < np.mean(a.losses[:20])
    a.model.save(tmp_path / "c.ck")
    m = FlowModel.load(tmp_path / "c.ck")
    np.testing.assert_array_equal(m.latent_mean, a.model.latent_mean)
    np.testing.assert_array_equal(m.latent_std, a.model.latent_std)
    z1, _ = generate_latent(m, [0.35], 9)
    z2, _ = generate_latent(a.model, [0.35], 9)
    np.testing.assert_array_equal(z1, z2)
    with pytest.raises(ConfigError):
        train_cfm(_affine_corpus()[:1], norm, cfg, 0)


def test_validation_keeps_earliest_best():
    norm = ConditionNormalizer(("e",), (0.0,), (1.0,))
    cfg = CfmConfig(d_model=8, layers=1, heads=1, dropout=0.0, epochs=6, lr=1e-2, batch=4)
    res = train_cfm(_affine_corpus(), norm, cfg, 0, validate=lambda m: 1.0, eval_every=2)
    assert [e for e, _ in res.val_scores] == [1, 3, 5]
    assert res.best_epoch == 1


def test_unconditional_ignores_condition():
    m = _model()
    m.unconditional = True
    a, _ = generate_latent(m, [0.1], 3)
    b, _ = generate_latent(m, [0.9], 3)
    np.testing.assert_array_equal(a, b)


def test_generate_latent_record_and_destandardization(tmp_path):
    m = _model()
    m.latent_mean = np.full((2, 3), 5.0)
    m.latent_std = np.full((2, 3), 2.0)
    z, rec = generate_latent(m, [0.5], 1, n_steps=4)
    assert len(rec.states) == 5 and np.array_equal(rec.states[-1], z)
    z0 = np.random.default_rng(1).standard_normal((2, 3))
    np.testing.assert_array_equal(rec.states[0], z0 * 2.0 + 5.0)
    rec.write_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "step,token,dim,value" and len(lines) == 1 + 5 * 6
    with pytest.raises(NumericError):
        FlowPathRecord(np.zeros(1), [np.array([np.nan])])


def test_generate_forecaster():
    schema = WeightSchema((describe_layer(0, "lin", "linear", (3, 2)),))
    vae = WeightVAE(schema, VaeConfig(d_model=8, layers=1, heads=2, d_z=3), 0)
    m = _model(n_tokens=3, d_z=3)
    ck, _ = generate_forecaster(vae, m, [0.2], 4, env_id="x")
    assert ck.payload.size == schema.n_values and ck.metadata["generated_for"] == [0.2]
    ck2, _ = generate_forecaster(vae, m, [0.2], 4)
    np.testing.assert_array_equal(ck.payload, ck2.payload)
    with pytest.raises(ValueError):
        generate_forecaster(vae, _model(n_tokens=2, d_z=3), [0.2], 4)


def test_paper_defaults():
    c = CfmConfig()
    assert (c.d_model, c.layers, c.heads, c.dropout, c.sigma_path, c.n_steps) == (128, 4, 2, 0.1, 0.0, 100)

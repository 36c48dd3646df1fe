from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coefflow import nn
from coefflow.dynamics import Environment, Trajectory, integrate_environment
from coefflow.forecaster import (
    ExpertCheckpoint, ExpertTrainConfig, ForecasterConfig, evaluate_rmse, forecaster_forward, init_params,
    make_windows, persistence_baseline, persistence_rmse, predict, rmse, train_expert,
)
from coefflow.graphs import Graph, generate_ba
from coefflow.tokenizer import derive_schema

SMALL = ForecasterConfig(H=6, N=3, channels=4, k_t=2, blocks=1)


def _traj(states, train_steps=None):
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[..., None]
    m, s = float(states.mean()), float(states.std())
    return Trajectory("env000", 0.1, states, m, s if s > 1e-12 else 1.0, train_steps or len(states))


def _sis_traj(n=5, T=40, seed=0, gamma=0.3):
    g = generate_ba(n, 2, seed)
    env = Environment("env000", "sis", {"beta": 0.3, "gamma": gamma}, "train", 0)
    x0 = np.random.default_rng(seed).uniform(0.01, 0.1, n)
    return g, _traj(integrate_environment(env, g, x0, 0.1, T - 1))


def test_window_counts_and_alignment():
    T, H, N = 10, 4, 3
    tr = _traj(np.arange(T * 2).reshape(T, 2))
    xin, tgt = make_windows(tr, H, N, standardized=False)
    assert len(xin) == T - H - N + 1
    np.testing.assert_array_equal(xin[0, :, 0], [0, 2, 4, 6])
    np.testing.assert_array_equal(tgt[0, :, 0], [8, 10, 12])
    tr = _traj(np.random.default_rng(0).random((H + N, 3)))
    assert len(make_windows(tr, H, N)[0]) == 1
    tr = _traj(np.random.default_rng(0).random((H + N + 5, 3)))
    assert len(make_windows(tr, H, N)[0]) == 6
    with pytest.raises(ValueError, match="at least H \\+ N = 7"):
        make_windows(_traj(np.ones((6, 2))), H, N)


def test_standardization_round_trip(rng):
    tr = _traj(rng.random((20, 3)))
    xin, _ = make_windows(tr, 5, 2)
    raw, _ = make_windows(tr, 5, 2, standardized=False)
    np.testing.assert_allclose(tr.destandardize(xin), raw, rtol=0, atol=1e-12)


def test_zero_params_give_zero_output(rng):
    P = init_params(SMALL, 0)
    P.load_flat(np.zeros(P.n_values()))
    g = generate_ba(5, 2, 0)
    out = forecaster_forward(P, rng.standard_normal((2, 6, 5)), g.normalized_adjacency(), SMALL)
    assert out.shape == (2, 3, 5)
    np.testing.assert_array_equal(out.data, 0.0)


def test_single_node_is_temporal_only(rng):
    P = init_params(SMALL, 1)
    x = rng.standard_normal((1, 6, 1))
    lone = Graph(1, np.zeros((1, 1)))
    a = forecaster_forward(P, x, lone.normalized_adjacency(), SMALL).data
    np.testing.assert_array_equal(lone.normalized_adjacency(), [[1.0]])
    assert a.shape == (1, 3, 1) and np.all(np.isfinite(a))


@given(seed=st.integers(0, 1000))
def test_node_permutation_equivariance(seed):
    r = np.random.default_rng(seed)
    g = generate_ba(7, 2, seed)
    perm = r.permutation(7)
    P = init_params(SMALL, seed)
    x = r.standard_normal((2, 6, 7))
    y = forecaster_forward(P, x, g.normalized_adjacency(), SMALL).data
    yp = forecaster_forward(P, x[..., perm], g.permuted(perm).normalized_adjacency(), SMALL).data
    np.testing.assert_allclose(yp, y[..., perm], rtol=1e-10, atol=1e-12)


def test_forecast_loss_gradient_check(rng):
    g = generate_ba(5, 2, 0)
    P = init_params(SMALL, 3)
    x, t = rng.standard_normal((3, 6, 5)), rng.standard_normal((3, 3, 5))
    A = g.normalized_adjacency()
    err = nn.grad_check(lambda: nn.mse_loss(forecaster_forward(P, x, A, SMALL), t), P.tensors())
    assert err < 1e-4


def test_desk_parameter_count_and_tokens():
    desk = ForecasterConfig()
    assert init_params(desk, 0).n_values() <= 20_000
    cfg = ForecasterConfig(H=20, N=20)
    schema = derive_schema(cfg)
    # hand count: (48+72+192+16) + (384+72+192+16) + 8*8*12 + 20*9
    assert schema.n_values == init_params(cfg, 0).n_values() == 1940
    # 33 tokens per block, 8 for the collapsing conv, 20 for the head
    assert schema.n_tokens == 94
    assert derive_schema(cfg, generate_ba(30, 2, 0)) == derive_schema(cfg, generate_ba(30, 4, 9))


def test_persistence_examples(rng):
    const = np.full((4, 3), 0.7)
    np.testing.assert_array_equal(persistence_baseline(const, 5), np.full((5, 3), 0.7))
    x = rng.random((4, 3))
    np.testing.assert_array_equal(persistence_baseline(x, 1), x[-1:])
    _, tr = _sis_traj(gamma=0.9)
    assert persistence_rmse(tr, SMALL) > 0


def test_rmse_definitions(rng):
    target = rng.random((7, 3, 4))
    assert rmse(target, target) == 0.0
    assert rmse(np.full_like(target, target.mean()), target) == pytest.approx(target.std(), rel=1e-12)
    perm = rng.permutation(7)
    assert rmse(target[perm] * 0.5, target[perm]) == pytest.approx(rmse(target * 0.5, target), rel=1e-12)


def test_constant_trajectory_is_learned():
    g = generate_ba(5, 2, 0)
    tr = _traj(np.full((30, 5), 0.3))
    ck = train_expert(tr, g, SMALL, 0, ExpertTrainConfig(epochs=40, batch=8, lr=1e-2))
    assert evaluate_rmse(ck.payload, tr, g, SMALL) < 1e-3


def test_training_determinism_and_checkpoint(tmp_path):
    g, tr = _sis_traj()
    tc = ExpertTrainConfig(epochs=2, batch=8, lr=1e-2)
    a = train_expert(tr, g, SMALL, 4, tc)
    b = train_expert(tr, g, SMALL, 4, tc)
    np.testing.assert_array_equal(a.payload, b.payload)
    assert a.metadata["seed"] == 4 and a.metadata["epochs"] == 2
    assert np.isfinite(a.metadata["final_train_loss"])
    a.save(tmp_path / "e.ck")
    c = ExpertCheckpoint.load(tmp_path / "e.ck")
    np.testing.assert_array_equal(c.payload, a.payload)
    assert c.env_id == "env000" and c.schema == derive_schema(SMALL)


def test_training_improves_on_persistence():
    g, tr = _sis_traj(n=6, T=60, gamma=0.2)
    ck = train_expert(tr, g, SMALL, 0, ExpertTrainConfig(epochs=30, batch=8, lr=1e-2))
    assert evaluate_rmse(ck.payload, tr, g, SMALL) < persistence_rmse(tr, SMALL)


def test_predict_matches_forward(rng):
    g = generate_ba(5, 2, 0)
    P = init_params(SMALL, 0)
    x = rng.standard_normal((5, 6, 5))
    A = g.normalized_adjacency()
    np.testing.assert_allclose(predict(P, x, A, SMALL, chunk=2), forecaster_forward(P, x, A, SMALL).data,
                               rtol=1e-13)


def test_config_validation():
    with pytest.raises(ValueError):
        ForecasterConfig(H=4, N=1, k_t=3, blocks=1)
    with pytest.raises(ValueError):
        ExpertTrainConfig(schedule="cosine")

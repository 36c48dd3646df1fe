from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coefflow import _kernels
from coefflow.dynamics import (
    ConfigError, DatasetSpec, DomainError, Environment, NumericError, build_environment_grid, euler_integrate,
    hill_rhs, integrate_environment, load_dataset, sis_rhs, simulate_dataset,
)
from coefflow.graphs import Graph, GraphSpec, generate_ba, generate_regular, spectral_radius

EDGELESS1 = Graph(1, np.zeros((1, 1)))
PAIR = Graph(2, np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_hill_rhs_examples():
    g = generate_ba(5, 2, 0)
    assert np.all(hill_rhs(np.zeros(5), g, {"a": 0.5, "h": 1.0}) == 0)
    assert hill_rhs([1.0], EDGELESS1, {"a": 0.5, "h": 1.0}).item() == -1.0
    # -1 * 1^0.5 + 1 / (1 + 1)
    np.testing.assert_array_equal(hill_rhs([1.0, 1.0], PAIR, {"a": 0.5, "h": 1.0}).ravel(), [-0.5, -0.5])
    with pytest.raises(DomainError):
        hill_rhs([-0.1, 1.0], PAIR, {"a": 0.5, "h": 1.0})


def test_sis_rhs_examples():
    g = generate_ba(6, 2, 1)
    c = {"beta": 0.3, "gamma": 0.2}
    assert np.all(sis_rhs(np.zeros(6), g, c) == 0)
    np.testing.assert_allclose(sis_rhs(np.ones(6), g, c).ravel(), -0.2, rtol=0, atol=0)
    with pytest.raises(DomainError):
        sis_rhs(np.full(6, 1.1), g, c)


@given(k=st.integers(2, 5), beta=st.floats(0.1, 1.0), frac=st.floats(0.05, 0.95), seed=st.integers(0, 100))
def test_sis_regular_fixed_point_residual(k, beta, frac, seed):
    n = 12
    g = generate_regular(n, k, seed)
    gamma = frac * beta * k
    if not 0 < gamma <= 1:
        return
    x = np.full(n, 1.0 - gamma / (beta * k))
    assert np.abs(sis_rhs(x, g, {"beta": beta, "gamma": gamma})).max() < 1e-12


def test_euler_examples():
    const = euler_integrate(lambda x: np.zeros_like(x), np.array([0.3, 0.7]), 0.1, 5)
    assert np.all(const == const[0])
    one = euler_integrate(lambda x: -x, np.array([1.0]), 0.1, 1)
    assert one[1, 0] == pytest.approx(0.9, abs=1e-15)
    with pytest.raises(NumericError, match="step 1"):
        euler_integrate(lambda x: x * np.inf, np.array([1.0]), 0.1, 3)


def euler_error(dt):
    steps = int(round(1.0 / dt))
    return abs(euler_integrate(lambda x: -x, np.array([1.0]), dt, steps)[-1, 0] - np.exp(-1.0))


def test_euler_first_order():
    ratio = euler_error(0.01) / euler_error(0.005)
    assert 1.8 <= ratio <= 2.2
    order = np.log2(ratio)
    assert abs(order - 1.0) <= 0.2


def _spec(**kw):
    base = dict(kind="sis", graph=GraphSpec("ba", n=10, m=2, seed=0),
                train_box={"beta": (0.02, 0.02, 1), "gamma": (0.2, 0.4264, 40)},
                ood_box={"beta": (0.02, 0.02, 1), "gamma": (0.4728, 0.9302, 10)}, T=30, dt=0.1)
    base.update(kw)
    return DatasetSpec(**base)


def test_collab_grid_splits():
    envs = build_environment_grid(_spec(), 0)
    assert len(envs) == 50
    inside = [e for e in envs if e.split != "test_out"]
    assert len(inside) == 40
    assert all(e.coeffs["beta"] == 0.02 for e in envs)
    counts = {s: sum(e.split == s for e in envs) for s in ("train", "val", "test_in", "test_out")}
    assert counts == {"train": 28, "val": 4, "test_in": 8, "test_out": 10}
    gammas = [e.coeffs["gamma"] for e in inside]
    assert min(gammas) == 0.2 and max(gammas) == pytest.approx(0.4264)


def test_epidemic_grid_and_no_ood():
    spec = _spec(train_box={"beta": (0.5, 0.5, 1), "gamma": (0.02, 0.033, 10)},
                 ood_box={"beta": (0.5, 0.5, 1), "gamma": (0.036, 0.039, 3)})
    envs = build_environment_grid(spec, 1)
    assert sum(e.split == "test_out" for e in envs) == 3
    spec = _spec(ood_box=None)
    assert all(e.split != "test_out" for e in build_environment_grid(spec, 0))


def test_grid_errors():
    with pytest.raises(ConfigError, match="val"):
        build_environment_grid(_spec(train_box={"beta": (0.02, 0.02, 1), "gamma": (0.2, 0.4, 3)}), 0)
    with pytest.raises(ConfigError, match="train"):
        build_environment_grid(_spec(ood_box={"beta": (0.02, 0.02, 1), "gamma": (0.1, 0.9, 3)}), 0)


def test_boundary_ood_rows_are_ood_only():
    from coefflow.config import hill_analog
    spec = hill_analog()
    envs = build_environment_grid(spec, 0)
    inside = [e for e in envs if e.split != "test_out"]
    # a = 0.6 rows with h in the OOD sub-range never reach train/val/test_in
    assert not [e for e in inside if e.coeffs["a"] == 0.6 and e.coeffs["h"] >= 1.258]
    assert [e for e in inside if e.coeffs["a"] == 0.6]
    out = [e for e in envs if e.split == "test_out"]
    assert len(out) == 10 and all(e.coeffs["a"] == 0.6 for e in out)


def test_environment_invariants():
    with pytest.raises(ConfigError):
        Environment("e", "sis", {"beta": 1.5, "gamma": 0.1}, "train", 0)
    with pytest.raises(ConfigError):
        Environment("e", "hill", {"a": 1.5, "h": 1.0}, "train", 0)


def test_simulate_shape_and_determinism(tmp_path):
    spec = _spec(train_box={"beta": (0.02, 0.02, 1), "gamma": (0.2, 0.4, 10)}, ood_box=None, T=10)
    a = simulate_dataset(spec, 3, tmp_path / "a")
    b = simulate_dataset(spec, 3, tmp_path / "b")
    ds = load_dataset(a)
    assert len(ds.trajectories) == 10
    assert all(t.states.shape == (10, 10, 1) for t in ds.trajectories.values())
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    for t in ds.trajectories.values():
        assert t.std > 0
        x = t.states[0, :, 0]
        assert np.all((x >= 0.01) & (x <= 0.1))
    assert [e.split for e in ds.environments] == [e.split for e in build_environment_grid(spec, 3)]


def test_two_environment_dataset(tmp_path):
    spec = DatasetSpec(kind="sis", graph=GraphSpec("ba", n=5, m=1), T=10, dt=0.1,
                       train_box={"beta": (0.1, 0.2, 2), "gamma": (0.3, 0.3, 1)}, fractions=(0.0, 0.0, 1.0))
    with pytest.raises(ConfigError):
        build_environment_grid(spec, 0)


def test_sub_threshold_decay():
    g = generate_ba(30, 2, 0)
    lam = spectral_radius(g)
    gamma = 0.5
    beta = 0.5 * gamma / lam
    dt = 0.1
    T = int(np.ceil(50 / gamma / dt))
    env = Environment("e", "sis", {"beta": beta, "gamma": gamma}, "train", 0)
    states = integrate_environment(env, g, np.full(30, 0.1), dt, T)
    assert states[-1].max() < 1e-3


def test_sis_stays_in_unit_box_and_clamp_mass():
    g = generate_ba(20, 3, 2)
    x0 = np.random.default_rng(0).uniform(0.01, 0.1, 20)
    env = Environment("e", "sis", {"beta": 1.0, "gamma": 0.05}, "train", 0)
    states = integrate_environment(env, g, x0, 0.5, 400)
    assert states.min() >= 0 and states.max() <= 1
    _, clamped, _, _ = _kernels.euler_sis(g.adjacency, x0, 0.02, 0.3, 0.1, 400)
    assert clamped < 1e-6


def test_hill_negative_state_rejected():
    env = Environment("e", "hill", {"a": 1.0, "h": 1.0}, "train", 0)
    with pytest.raises(DomainError):
        integrate_environment(env, EDGELESS1, np.array([1.0]), 2.5, 3)

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coefflow.graphs import (
    EdgeListError, Graph, GraphError, GraphSpec, complete_graph, cycle_graph, generate_ba, generate_regular,
    load_edge_list, save_edge_list, spectral_radius,
)


def _check_invariants(g: Graph):
    A = g.adjacency
    assert np.array_equal(A, A.T)
    assert np.all(np.diag(A) == 0)
    assert np.all(np.isfinite(A)) and np.all(A >= 0)


def test_ba_triangle():
    g = generate_ba(3, 2, 0)
    assert g.n_edges == 3
    assert np.array_equal(g.adjacency, np.ones((3, 3)) - np.eye(3))


def test_ba_handshake_and_edge_count():
    g = generate_ba(100, 2, 7)
    assert g.degrees.sum() == 2 * g.n_edges
    # (m+1)-clique plus m edges for each of the n-m-1 later nodes
    assert g.n_edges == 3 + 2 * 97 == 197
    assert g.is_connected()


def test_ba_rejects_bad_sizes():
    with pytest.raises(GraphError):
        generate_ba(2, 2, 0)
    with pytest.raises(GraphError):
        generate_ba(5, 0, 0)


@given(n=st.integers(4, 40), m=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_ba_invariants_and_determinism(n, m, seed):
    if n <= m:
        return
    g = generate_ba(n, m, seed)
    _check_invariants(g)
    assert g.is_connected()
    assert g.n_edges == m * (m + 1) // 2 + m * (n - m - 1)
    assert g == generate_ba(n, m, seed)


def test_regular_examples():
    g = generate_regular(4, 2, 0)
    assert set(g.degrees) == {2}
    assert generate_regular(6, 3, 1).n_edges == 9
    assert spectral_radius(generate_regular(10, 4, 2)) == pytest.approx(4.0, abs=1e-6)


def test_regular_parity_rejected():
    with pytest.raises(GraphError):
        generate_regular(5, 3, 0)


@given(n=st.integers(5, 30), k=st.integers(2, 4), seed=st.integers(0, 10_000))
def test_regular_invariants(n, k, seed):
    if (n * k) % 2 or k >= n:
        return
    g = generate_regular(n, k, seed)
    _check_invariants(g)
    assert np.all(g.degrees == k)
    assert g == generate_regular(n, k, seed)


def test_spectral_radius_closed_forms():
    assert spectral_radius(complete_graph(4)) == pytest.approx(3.0, abs=1e-6)
    assert spectral_radius(cycle_graph(4)) == pytest.approx(2.0, abs=1e-6)
    edge = Graph(2, np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert spectral_radius(edge) == pytest.approx(1.0, abs=1e-6)


@given(seed=st.integers(0, 1000))
def test_spectral_radius_matches_eigvalsh(seed):
    g = generate_ba(15, 2, seed)
    assert spectral_radius(g) == pytest.approx(np.linalg.eigvalsh(g.adjacency).max(), rel=1e-6)


def test_edge_list_examples(tmp_path):
    p = tmp_path / "path.txt"
    p.write_text("0 1\n1 2")
    g = load_edge_list(p)
    assert g.n == 3 and g.n_edges == 2 and g.adjacency[0, 2] == 0

    p.write_text("0 1 2.0\n1 0 1.0")
    g = load_edge_list(p)
    assert g.n_edges == 1 and g.adjacency[0, 1] == 2.0

    p.write_text("0 0")
    with pytest.raises(EdgeListError, match="node 0"):
        load_edge_list(p)

    p.write_text("0 1\n1 x\n")
    with pytest.raises(EdgeListError, match=":2:"):
        load_edge_list(p)


@given(seed=st.integers(0, 1000))
def test_edge_list_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    A = np.triu(rng.uniform(0.1, 3.0, (7, 7)) * (rng.random((7, 7)) < 0.4), 1)
    A = A + A.T
    g = Graph(7, A)
    path = tmp_path_factory.mktemp("el") / "g.edges"
    save_edge_list(g, path)
    assert load_edge_list(path) == g


def test_graph_invariants_enforced():
    with pytest.raises(GraphError):
        Graph(2, np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(GraphError):
        Graph(2, np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(GraphError):
        Graph(2, np.array([[0.0, -1.0], [-1.0, 0.0]]))


def test_graph_spec_builds():
    assert GraphSpec("ba", n=10, m=2, seed=3).build() == generate_ba(10, 2, 3)
    with pytest.raises(GraphError):
        GraphSpec("nope").build()

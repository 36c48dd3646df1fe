"""Static undirected network topologies."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

MAX_CONNECT_RETRIES = 32


class GraphError(ValueError):
    pass


class EdgeListError(GraphError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    adjacency: np.ndarray = field(repr=False)
    name: str = "graph"

    def __post_init__(self):
        A = np.array(self.adjacency, dtype=np.float64, copy=True)
        if self.n < 1 or A.shape != (self.n, self.n):
            raise GraphError(f"adjacency shape {A.shape} does not match n={self.n}")
        if not np.all(np.isfinite(A)) or np.any(A < 0):
            raise GraphError("adjacency entries must be finite and nonnegative")
        if np.any(np.diag(A) != 0):
            raise GraphError("adjacency diagonal must be zero")
        if not np.array_equal(A, A.T):
            raise GraphError("adjacency must be symmetric")
        A.setflags(write=False)
        object.__setattr__(self, "adjacency", A)

    @property
    def degrees(self) -> np.ndarray:
        return (self.adjacency > 0).sum(axis=1)

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(np.triu(self.adjacency)))

    def edges(self) -> list[tuple[int, int, float]]:
        iu, ju = np.nonzero(np.triu(self.adjacency))
        return [(int(i), int(j), float(self.adjacency[i, j])) for i, j in zip(iu, ju)]

    def is_connected(self) -> bool:
        ncomp, _ = connected_components(self.adjacency > 0, directed=False)
        return ncomp == 1

    def normalized_adjacency(self) -> np.ndarray:
        """Symmetric normalization with self loops, D^-1/2 (A+I) D^-1/2."""
        At = self.adjacency + np.eye(self.n)
        d = 1.0 / np.sqrt(At.sum(axis=1))
        return d[:, None] * At * d[None, :]

    def permuted(self, perm) -> "Graph":
        perm = np.asarray(perm)
        return Graph(self.n, self.adjacency[np.ix_(perm, perm)], self.name)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.adjacency, other.adjacency)


def _from_edges(n, edges, name):
    A = np.zeros((n, n))
    for u, v in edges:
        A[u, v] = A[v, u] = 1.0
    return Graph(n, A, name)


def _ba_once(n, m, rng):
    m0 = m + 1
    edges = [(i, j) for i in range(m0) for j in range(i + 1, m0)]
    # each node appears once per incident edge, so uniform picks are degree-proportional
    pool = [v for e in edges for v in e]
    for new in range(m0, n):
        targets: set[int] = set()
        while len(targets) < m:
            targets.add(pool[int(rng.integers(len(pool)))])
        for t in sorted(targets):
            edges.append((t, new))
            pool.extend((t, new))
    return edges


def generate_ba(n: int, m: int, seed: int, name: str | None = None) -> Graph:
    """Barabasi-Albert graph grown from an (m+1)-clique, binary weights."""
    if not (m >= 1 and n > m):
        raise GraphError(f"BA graph needs n > m >= 1, got n={n}, m={m}")
    rng = np.random.default_rng(seed)
    return _from_edges(n, _ba_once(n, m, rng), name or f"ba_n{n}_m{m}_s{seed}")


def _regular_once(n, k, rng, max_tries=20_000):
    # pairing model with restarts
    for _ in range(max_tries):
        stubs = np.repeat(np.arange(n), k)
        rng.shuffle(stubs)
        pairs = stubs.reshape(-1, 2)
        if np.any(pairs[:, 0] == pairs[:, 1]):
            continue
        keys = np.sort(pairs, axis=1)
        if len(np.unique(keys, axis=0)) != len(keys):
            continue
        return [tuple(map(int, p)) for p in keys]
    return None


def generate_regular(n: int, k: int, seed: int, name: str | None = None) -> Graph:
    """Connected k-regular simple graph.

    Disconnected draws are rejected and regenerated with ``seed + 1, seed + 2, ...``.
    """
    if (n * k) % 2 != 0:
        raise GraphError(f"n*k must be even for a {k}-regular graph on {n} nodes")
    if not (0 < k < n):
        raise GraphError(f"need 0 < k < n, got n={n}, k={k}")
    for attempt in range(MAX_CONNECT_RETRIES + 1):
        rng = np.random.default_rng(seed + attempt)
        edges = _regular_once(n, k, rng)
        if edges is None:
            continue
        g = _from_edges(n, edges, name or f"regular_n{n}_k{k}_s{seed}")
        if g.is_connected():
            if attempt:
                log.info("regular graph connected after %d reseeds", attempt)
            return g
    raise GraphError(f"no connected {k}-regular graph on {n} nodes after {MAX_CONNECT_RETRIES} retries")


def complete_graph(n: int) -> Graph:
    return Graph(n, np.ones((n, n)) - np.eye(n), f"complete_{n}")


def cycle_graph(n: int) -> Graph:
    return _from_edges(n, [(i, (i + 1) % n) for i in range(n)], f"cycle_{n}")


def load_edge_list(path) -> Graph:
    """Read ``u v [w]`` lines with 0-based ids; duplicates keep the max weight.

    A ``# nodes N`` comment line fixes the node count (trailing isolated nodes);
    other ``#`` lines are ignored.
    """
    path = Path(path)
    edges: dict[tuple[int, int], float] = {}
    n_decl = 0
    with path.open() as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "nodes":
                    try:
                        n_decl = int(parts[1])
                    except ValueError:
                        raise EdgeListError(f"{path}:{lineno}: bad node count {parts[1]!r}") from None
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise EdgeListError(f"{path}:{lineno}: expected 'u v [w]', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise EdgeListError(f"{path}:{lineno}: cannot parse {line!r}") from None
            if u < 0 or v < 0:
                raise EdgeListError(f"{path}:{lineno}: negative node id")
            if u == v:
                raise EdgeListError(f"{path}:{lineno}: self-loop on node {u}")
            if not np.isfinite(w) or w <= 0:
                raise EdgeListError(f"{path}:{lineno}: weight must be finite and positive")
            key = (min(u, v), max(u, v))
            edges[key] = max(w, edges.get(key, 0.0))
    if not edges and n_decl == 0:
        raise EdgeListError(f"{path}: no edges")
    n = max([n_decl] + [v + 1 for _, v in edges])
    A = np.zeros((n, n))
    for (u, v), w in edges.items():
        A[u, v] = A[v, u] = w
    return Graph(n, A, path.stem)


def save_edge_list(g: Graph, path) -> None:
    lines = [f"# nodes {g.n}"]
    lines += [f"{u} {v} {w:.17g}" for u, v, w in g.edges()]
    Path(path).write_text("\n".join(lines) + "\n")


def spectral_radius(g: Graph, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest adjacency eigenvalue by power iteration on A + I.

    The unit shift makes the Perron root strictly dominant even for bipartite
    graphs, where A alone has a +/- pair of equal magnitude.
    """
    B = g.adjacency + np.eye(g.n)
    x = np.ones(g.n) / np.sqrt(g.n)
    mu = 0.0
    resid = np.inf
    for _ in range(max_iter):
        y = B @ x
        mu = float(x @ y)
        resid = float(np.linalg.norm(y - mu * x))
        if resid <= tol * abs(mu):
            return mu - 1.0
        x = y / np.linalg.norm(y)
    raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations (residual {resid:.3e})")


@dataclass(frozen=True)
class GraphSpec:
    """Recipe for a topology: ``ba``, ``regular`` or ``edge_list``."""

    generator: str = "ba"
    n: int = 30
    m: int = 2
    k: int = 4
    seed: int = 0
    path: str | None = None
    name: str | None = None

    def build(self) -> Graph:
        if self.generator == "ba":
            return generate_ba(self.n, self.m, self.seed, self.name)
        if self.generator == "regular":
            return generate_regular(self.n, self.k, self.seed, self.name)
        if self.generator == "edge_list":
            if not self.path:
                raise GraphError("edge_list generator needs a path")
            g = load_edge_list(self.path)
            return Graph(g.n, g.adjacency, self.name or g.name)
        raise GraphError(f"unknown graph generator {self.generator!r}")

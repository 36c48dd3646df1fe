"""Hill and SIS network dynamics, Euler integration and multi-environment datasets."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .graphs import Graph, GraphSpec, load_edge_list, save_edge_list

log = logging.getLogger(__name__)

COEFF_NAMES = {"sis": ("beta", "gamma"), "hill": ("a", "h")}
SPLITS = ("train", "val", "test_in", "test_out")
SIS_TOL = 1e-9
MANIFEST_VERSION = 1


class DomainError(ValueError):
    pass


class NumericError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Environment:
    id: str
    kind: str
    coeffs: dict
    split: str
    x0_seed: int

    def __post_init__(self):
        if self.kind not in COEFF_NAMES:
            raise ConfigError(f"unknown dynamics kind {self.kind!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}")
        for k, v in self.coeffs.items():
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"{self.id}: coefficient {k}={v} must be finite and > 0")
        c = self.coeffs
        if self.kind == "hill" and not (0 < c["a"] <= 1 and c["h"] > 0):
            raise ConfigError(f"{self.id}: hill needs 0 < a <= 1 and h > 0")
        if self.kind == "sis" and not (0 < c["beta"] <= 1 and 0 < c["gamma"] <= 1):
            raise ConfigError(f"{self.id}: sis needs beta, gamma in (0, 1]")

    def vector(self) -> np.ndarray:
        return np.array([self.coeffs[k] for k in COEFF_NAMES[self.kind]])


@dataclass
class Trajectory:
    env_id: str
    dt: float
    states: np.ndarray  # (T, n, 1), raw scale
    mean: float
    std: float
    train_steps: int

    @property
    def T(self) -> int:
        return self.states.shape[0]

    def standardize(self, x):
        return (x - self.mean) / self.std

    def destandardize(self, x):
        return x * self.std + self.mean


# ---------------------------------------------------------------------------
# right-hand sides
# ---------------------------------------------------------------------------

def _as_col(X):
    X = np.asarray(X, dtype=np.float64)
    return X.reshape(-1, 1) if X.ndim == 1 else X


def hill_rhs(X, g: Graph, coeffs, B: float = 1.0):
    """dx_i/dt = -B x_i^a + sum_j A_ij x_j^h / (1 + x_j^h)."""
    X = _as_col(X)
    if np.any(X < 0):
        raise DomainError(f"hill state must be >= 0 (min {X.min():.3e})")
    a, h = coeffs["a"], coeffs["h"]
    xh = X ** h
    return -B * X ** a + g.adjacency @ (xh / (1.0 + xh))


def sis_rhs(X, g: Graph, coeffs):
    """dx_i/dt = -gamma x_i + beta (1 - x_i) sum_j A_ij x_j."""
    X = _as_col(X)
    if np.any(X < -SIS_TOL) or np.any(X > 1 + SIS_TOL):
        raise DomainError("sis state outside [0, 1]")
    return -coeffs["gamma"] * X + coeffs["beta"] * (1.0 - X) * (g.adjacency @ X)


def euler_integrate(rhs, X0, dt: float, steps: int, clamp: tuple[float, float] | None = None):
    """Explicit Euler with ``steps`` updates; returns ``steps + 1`` states.

    With ``clamp`` the state is clipped after every update and the clipped
    mass is logged.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    X = np.array(X0, dtype=np.float64)
    out = np.empty((steps + 1,) + X.shape)
    out[0] = X
    clamped = 0.0
    for t in range(steps):
        X = X + dt * rhs(X)
        if not np.all(np.isfinite(X)):
            raise NumericError(f"non-finite state at step {t + 1}")
        if clamp is not None:
            Xc = np.clip(X, *clamp)
            clamped += float(np.abs(X - Xc).sum())
            X = Xc
        out[t + 1] = X
    if clamped:
        log.info("euler_integrate clamped total mass %.3e", clamped)
    return out


def integrate_environment(env: Environment, g: Graph, x0, dt: float, steps: int, hill_B: float = 1.0):
    """Fast-path integration through the compiled kernels; returns (steps+1, n)."""
    c = env.coeffs
    if env.kind == "sis":
        states, clamped, status, step = _kernels.euler_sis(g.adjacency, x0, c["beta"], c["gamma"], dt, steps)
        if clamped:
            log.info("%s: clamped mass %.3e", env.id, clamped)
    else:
        states, status, step = _kernels.euler_hill(g.adjacency, x0, c["a"], c["h"], hill_B, dt, steps)
    if status == _kernels.NONFINITE:
        raise NumericError(f"{env.id}: non-finite state at step {step}")
    if status == _kernels.NEGATIVE:
        raise DomainError(f"{env.id}: hill state went negative at step {step}")
    return states


# ---------------------------------------------------------------------------
# environment grids
# ---------------------------------------------------------------------------

@dataclass
class DatasetSpec:
    """Everything needed to materialize a multi-environment dataset.

    ``train_box`` and ``ood_box`` map each coefficient to ``(lo, hi, count)``;
    their Cartesian products form the in-range and out-of-range grids.
    """

    name: str = "dataset"
    kind: str = "sis"
    graph: GraphSpec = field(default_factory=GraphSpec)
    train_box: dict = field(default_factory=dict)
    ood_box: dict | None = None
    fractions: tuple = (0.7, 0.1, 0.2)
    T: int = 500
    dt: float | None = None
    x0_range: tuple | None = None
    vary_x0: bool = True
    time_train_frac: float = 1.0
    hill_B: float = 1.0

    def __post_init__(self):
        if self.kind not in COEFF_NAMES:
            raise ConfigError(f"unknown dynamics kind {self.kind!r}")
        if self.dt is None:
            self.dt = 0.5 if self.kind == "sis" else 0.01
        if self.x0_range is None:
            self.x0_range = (0.01, 0.1) if self.kind == "sis" else (0.5, 2.0)
        self.fractions = tuple(self.fractions)
        self.x0_range = tuple(self.x0_range)
        names = set(COEFF_NAMES[self.kind])
        for label, box in (("train_box", self.train_box), ("ood_box", self.ood_box)):
            if box is None:
                continue
            if set(box) != names:
                raise ConfigError(f"{label} must give exactly {sorted(names)}, got {sorted(box)}")
            for k, (lo, hi, cnt) in box.items():
                if hi < lo or int(cnt) < 1:
                    raise ConfigError(f"{label}.{k}: bad range ({lo}, {hi}, {cnt})")
        if not self.train_box:
            raise ConfigError("train_box is empty")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")

    @property
    def coeff_names(self):
        return COEFF_NAMES[self.kind]

    @property
    def train_steps(self) -> int:
        return int(round(self.time_train_frac * self.T))


def _grid(box, names):
    axes = []
    for k in names:
        lo, hi, cnt = box[k]
        axes.append(np.linspace(lo, hi, int(cnt)) if int(cnt) > 1 else np.array([lo]))
    return [dict(zip(names, map(float, p))) for p in itertools.product(*axes)]


def _x0_seed(seed: int, idx: int) -> int:
    return int(np.random.SeedSequence([seed, idx]).generate_state(1)[0])


def _in_box(coeffs, box, tol: float = 1e-12) -> bool:
    return all(box[k][0] - tol <= v <= box[k][1] + tol for k, v in coeffs.items())


def build_environment_grid(spec: DatasetSpec, seed: int) -> list[Environment]:
    """Grid environments; in-range points that fall inside the OOD box are OOD only."""
    names = spec.coeff_names
    inside = _grid(spec.train_box, names)
    outside = _grid(spec.ood_box, names) if spec.ood_box else []
    if outside:
        shared = [c for c in inside if _in_box(c, spec.ood_box)]
        if shared:
            # e.g. an OOD box on the boundary of the training box
            log.info("%d in-range grid points lie inside the OOD box and are left to the OOD split", len(shared))
            inside = [c for c in inside if not _in_box(c, spec.ood_box)]

    n_in = len(inside)
    f_train, f_val, _ = spec.fractions
    n_train = int(round(f_train * n_in))
    n_val = int(round(f_val * n_in))
    counts = {"train": n_train, "val": n_val, "test_in": n_in - n_train - n_val}
    for split, c in counts.items():
        if c <= 0:
            raise ConfigError(f"split {split!r} is empty ({n_in} in-range environments)")
    order = np.random.default_rng(seed).permutation(n_in)
    split_of = np.empty(n_in, dtype=object)
    split_of[order[:n_train]] = "train"
    split_of[order[n_train:n_train + n_val]] = "val"
    split_of[order[n_train + n_val:]] = "test_in"

    envs = []
    for idx, coeffs in enumerate(inside + outside):
        split = split_of[idx] if idx < n_in else "test_out"
        xs = _x0_seed(seed, idx if spec.vary_x0 else 0)
        envs.append(Environment(f"env{idx:03d}", spec.kind, coeffs, split, xs))
    return envs


def initial_state(spec: DatasetSpec, env: Environment, n: int) -> np.ndarray:
    lo, hi = spec.x0_range
    return np.random.default_rng(env.x0_seed).uniform(lo, hi, size=n)


def _stats(states, train_steps):
    part = states[:train_steps]
    mean = float(part.mean())
    std = float(part.std())
    # a flat train window carries no scale; fall back to unit scale
    return mean, (std if std > 1e-12 else 1.0)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass
class Dataset:
    path: Path
    name: str
    kind: str
    graph: Graph
    dt: float
    T: int
    n: int
    d: int
    train_steps: int
    seed: int
    train_ranges: dict
    ood_ranges: dict
    environments: list
    trajectories: dict

    @property
    def coeff_names(self):
        return COEFF_NAMES[self.kind]

    def by_split(self, split: str) -> list[Environment]:
        return [e for e in self.environments if e.split == split]

    def env(self, env_id: str) -> Environment:
        for e in self.environments:
            if e.id == env_id:
                return e
        raise KeyError(env_id)

    def total_ranges(self) -> dict:
        out = {}
        for k in self.coeff_names:
            lo, hi = self.train_ranges[k]
            if k in self.ood_ranges:
                lo, hi = min(lo, self.ood_ranges[k][0]), max(hi, self.ood_ranges[k][1])
            out[k] = (lo, hi)
        return out


def simulate_dataset(spec: DatasetSpec, seed: int, out_dir, graph: Graph | None = None) -> Path:
    """Integrate every environment of ``spec`` and write the dataset directory."""
    out = Path(out_dir)
    g = graph if graph is not None else spec.graph.build()
    envs = build_environment_grid(spec, seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        save_edge_list(g, out / "graph.edges")
    except OSError as exc:
        raise OSError(f"cannot write dataset to {out}: {exc}") from exc

    lines = [
        "# coefflow dataset manifest",
        f"format_version {MANIFEST_VERSION}",
        f"name {spec.name}",
        f"graph {g.name}",
        f"kind {spec.kind}",
        f"dt {_fmt(spec.dt)}",
        f"T {spec.T}",
        f"n {g.n}",
        "d 1",
        f"train_steps {spec.train_steps}",
        f"seed {seed}",
        f"coeffs {' '.join(spec.coeff_names)}",
    ]
    for k in spec.coeff_names:
        lo, hi, _ = spec.train_box[k]
        lines.append(f"range {k} {_fmt(lo)} {_fmt(hi)}")
    if spec.ood_box:
        for k in spec.coeff_names:
            lo, hi, _ = spec.ood_box[k]
            lines.append(f"ood_range {k} {_fmt(lo)} {_fmt(hi)}")

    for env in envs:
        x0 = initial_state(spec, env, g.n)
        states = integrate_environment(env, g, x0, spec.dt, spec.T - 1, spec.hill_B)
        mean, std = _stats(states, spec.train_steps)
        path = out / f"env_{env.id}.bin"
        try:
            states.astype("<f8").tofile(path)
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc}") from exc
        coeff_txt = " ".join(f"{k}={_fmt(env.coeffs[k])}" for k in spec.coeff_names)
        lines.append(
            f"env {env.id} split={env.split} x0_seed={env.x0_seed} {coeff_txt} mean={_fmt(mean)} std={_fmt(std)}"
        )
    (out / "manifest").write_text("\n".join(lines) + "\n")
    return out


def load_dataset(path) -> Dataset:
    path = Path(path)
    manifest = path / "manifest"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest in {path}")
    header: dict = {}
    ranges: dict = {}
    ood: dict = {}
    env_rows = []
    for line in manifest.read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key == "range":
            k, lo, hi = rest.split()
            ranges[k] = (float(lo), float(hi))
        elif key == "ood_range":
            k, lo, hi = rest.split()
            ood[k] = (float(lo), float(hi))
        elif key == "env":
            env_id, *kv = rest.split()
            env_rows.append((env_id, dict(item.split("=", 1) for item in kv)))
        else:
            header[key] = rest
    version = int(header.get("format_version", -1))
    if version != MANIFEST_VERSION:
        raise ConfigError(f"{manifest}: unsupported manifest version {version}")
    kind = header["kind"]
    T, n, d = int(header["T"]), int(header["n"]), int(header["d"])
    g = load_edge_list(path / "graph.edges")
    g = Graph(g.n, g.adjacency, header["graph"])
    envs, trajs = [], {}
    dt = float(header["dt"])
    train_steps = int(header["train_steps"])
    for env_id, kv in env_rows:
        coeffs = {k: float(kv[k]) for k in COEFF_NAMES[kind]}
        env = Environment(env_id, kind, coeffs, kv["split"], int(kv["x0_seed"]))
        states = np.fromfile(path / f"env_{env_id}.bin", dtype="<f8")
        if states.size != T * n * d:
            raise ConfigError(f"env {env_id}: expected {T * n * d} values, found {states.size}")
        envs.append(env)
        trajs[env_id] = Trajectory(env_id, dt, states.reshape(T, n, d), float(kv["mean"]), float(kv["std"]), train_steps)
    return Dataset(path, header["name"], kind, g, dt, T, n, d, train_steps, int(header["seed"]),
                   ranges, ood, envs, trajs)

"""Experiment stages: simulate, train experts, VAE and CFM, evaluate, ablate, perturb, export.

Every stage reads its inputs from, and writes its outputs to, one run
directory::

    dataset/            manifest, graph.edges, env_*.bin
    experts/            <env>.ck per train environment, summary.csv
    vae/vae.ck          cfm/cfm.ck
    ablations/          cfm_uncond.ck, flat_vae.ck, flat_cfm.ck
    eval/               metrics.csv, summary.csv, ablation_*.csv, robustness_*.csv
    latents/            paths.csv, pca.csv, correlation.csv

Downstream checkpoints record the sha256 of the files they were built
from; loading them re-hashes those files and refuses stale inputs.
Environment-parallel work goes through a process pool whose results are
gathered in submission order, so outputs do not depend on ``parallelism``.
"""
from __future__ import annotations

import csv
import logging
import os
import shutil
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .cfm import ConditionNormalizer, FlowModel, generate_forecaster, generate_latent, train_cfm
from .checkpoint import file_hash
from .config import ExperimentConfig
from .dynamics import ConfigError, Dataset, NumericError, load_dataset, simulate_dataset
from .forecaster import ExpertCheckpoint, evaluate_rmse, persistence_rmse, train_expert
from .tokenizer import derive_schema, flat_schema
from .vae import WeightVAE, encode_corpus, train_vae

log = logging.getLogger(__name__)

SPLIT_LABEL = {"test_in": "in_domain", "test_out": "out_domain"}


class UpstreamError(RuntimeError):
    """A required upstream artifact is missing or unreadable."""


class StaleArtifactError(UpstreamError):
    """An upstream file changed since a downstream artifact was built from it."""


class OutputExistsError(ConfigError):
    pass


class ExpertFailures(NumericError):
    def __init__(self, failures: dict):
        self.failures = failures
        super().__init__("experts diverged: " + ", ".join(f"{k} ({v})" for k, v in sorted(failures.items())))


# ---------------------------------------------------------------------------
# small utilities
# ---------------------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def pmap(fn, items, parallelism: int = 1) -> list:
    """Ordered map, in-process for ``parallelism <= 1``."""
    items = list(items)
    if parallelism <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(parallelism, len(items))) as ex:
        return list(ex.map(fn, items))


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def env_index(env_id: str) -> int:
    return int(env_id.lstrip("env"))


@contextmanager
def _lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        try:
            pid = int(lock.read_text().strip() or 0)
            os.kill(pid, 0)
        except (ValueError, ProcessLookupError, PermissionError):
            # left behind by a dead process
            lock.unlink(missing_ok=True)
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        else:
            raise OutputExistsError(f"{out} is locked by running process {pid}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------

@dataclass
class Run:
    cfg: ExperimentConfig
    out: Path | None = None
    parallelism: int = 1
    force: bool = False
    allow_failures: bool = False
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out = Path(self.out if self.out is not None else self.cfg.output_dir)

    # layout
    @property
    def dataset_dir(self) -> Path:
        return self.out / "dataset"

    @property
    def experts_dir(self) -> Path:
        return self.out / "experts"

    @property
    def vae_path(self) -> Path:
        return self.out / "vae" / "vae.ck"

    @property
    def cfm_path(self) -> Path:
        return self.out / "cfm" / "cfm.ck"

    @property
    def ablation_dir(self) -> Path:
        return self.out / "ablations"

    @property
    def eval_dir(self) -> Path:
        return self.out / "eval"

    @property
    def latents_dir(self) -> Path:
        return self.out / "latents"

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.out).as_posix()

    def check_output(self, path: Path):
        if path.exists() and not self.force:
            raise OutputExistsError(f"{path} already exists; pass --force to overwrite")

    @contextmanager
    def timed(self, name: str):
        t0 = time.perf_counter()
        yield
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    # upstream access
    def dataset(self) -> Dataset:
        return _load_dataset_cached(str(self.dataset_dir), _mtime(self.dataset_dir / "manifest"))

    def provenance(self, paths) -> dict:
        return {self.rel(p): file_hash(p) for p in paths}

    def verify(self, metadata: dict, what: str):
        for rel, digest in sorted(metadata.get("upstream", {}).items()):
            p = self.out / rel
            if not p.exists():
                raise UpstreamError(f"{what}: upstream file {rel} is missing")
            if file_hash(p) != digest:
                raise StaleArtifactError(f"{what}: upstream file {rel} changed since {what} was built")

    def expert_paths(self) -> list[Path]:
        paths = sorted(self.experts_dir.glob("env*.ck"))
        if not paths:
            raise UpstreamError(f"no expert checkpoints in {self.experts_dir}; run train-experts first")
        return paths

    def load_vae(self, path: Path | None = None) -> WeightVAE:
        path = self.vae_path if path is None else path
        if not path.exists():
            raise UpstreamError(f"{path} is missing; run train-vae first")
        vae = WeightVAE.load(path)
        self.verify(vae.metadata, self.rel(path))
        return vae

    def load_cfm(self, path: Path | None = None) -> FlowModel:
        path = self.cfm_path if path is None else path
        if not path.exists():
            raise UpstreamError(f"{path} is missing; run the stage that trains it first")
        model = FlowModel.load(path)
        self.verify(model.metadata, self.rel(path))
        return model


def _mtime(path: Path) -> float:
    if not path.exists():
        raise UpstreamError(f"{path} is missing; run simulate first")
    return path.stat().st_mtime_ns


@lru_cache(maxsize=4)
def _load_dataset_cached(path: str, _stamp) -> Dataset:
    return load_dataset(path)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(run: Run) -> Path:
    run.check_output(run.dataset_dir / "manifest")
    with run.timed("simulate"):
        if run.dataset_dir.exists():
            shutil.rmtree(run.dataset_dir)
        return simulate_dataset(run.cfg.dataset, run.cfg.base_seed, run.dataset_dir)


# ---------------------------------------------------------------------------
# experts
# ---------------------------------------------------------------------------

def _train_expert_task(args):
    traj, g, fcfg, tcfg, seed, init_seed = args
    try:
        ck = train_expert(traj, g, fcfg, seed, tcfg, init_seed=init_seed)
    except NumericError as exc:
        return traj.env_id, None, str(exc)
    return traj.env_id, ck, None


def cmd_train_experts(run: Run) -> list[Path]:
    """One expert per train environment, all from the same initialization."""
    ds = run.dataset()
    cfg = run.cfg
    run.check_output(run.experts_dir / "summary.csv")
    envs = ds.by_split("train")
    base = cfg.base_seed
    tasks = [(ds.trajectories[e.id], ds.graph, cfg.forecaster, cfg.expert, base, base) for e in envs]
    with run.timed("train_experts"):
        results = pmap(_train_expert_task, tasks, run.parallelism)
    if run.experts_dir.exists():
        shutil.rmtree(run.experts_dir)
    run.experts_dir.mkdir(parents=True)
    manifest = run.dataset_dir / "manifest"
    rows, failures, paths = [], {}, []
    for env, (env_id, ck, err) in zip(envs, results):
        coeffs = [env.coeffs[k] for k in ds.coeff_names]
        if ck is None:
            failures[env_id] = err
            rows.append([env_id, env.split, *coeffs, "diverged", "", "", "", ""])
            continue
        traj = ds.trajectories[env_id]
        ck.metadata["upstream"] = run.provenance([manifest, ds.path / f"env_{env_id}.bin"])
        ck.metadata["coeffs"] = env.coeffs
        path = ck.save(run.experts_dir / f"{env_id}.ck")
        paths.append(path)
        r = evaluate_rmse(ck.payload, traj, ds.graph, cfg.forecaster)
        p = persistence_rmse(traj, cfg.forecaster)
        rows.append([env_id, env.split, *coeffs, "ok", ck.metadata["final_train_loss"], ck.metadata["best_epoch"], r, p])
    write_csv(run.experts_dir / "summary.csv",
              ["env_id", "split", *ds.coeff_names, "status", "final_train_loss", "best_epoch", "rmse",
               "persistence_rmse"], rows)
    if failures:
        for k, v in sorted(failures.items()):
            log.error("expert %s excluded: %s", k, v)
        if not run.allow_failures:
            raise ExpertFailures(failures)
    return paths


def load_experts(run: Run, paths=None) -> list[ExpertCheckpoint]:
    experts = []
    for p in (run.expert_paths() if paths is None else paths):
        ck = ExpertCheckpoint.load(p)
        run.verify(ck.metadata, run.rel(p))
        experts.append(ck)
    return experts


# ---------------------------------------------------------------------------
# VAE and CFM
# ---------------------------------------------------------------------------

def flat_token_dim(run: Run) -> int:
    if run.cfg.evaluation.flat_token_dim:
        return int(run.cfg.evaluation.flat_token_dim)
    schema = derive_schema(run.cfg.forecaster)
    return -(-schema.n_values // schema.n_tokens)


def step_matched_epochs(epochs: int, batch: int, n_full: int, n_sub: int) -> int:
    """Epochs on ``n_sub`` samples giving the optimizer steps of ``epochs`` on ``n_full``."""
    return int(round(epochs * -(-n_full // batch) / -(-n_sub // batch)))


def _fit_vae(run: Run, expert_paths, out_path: Path, flat: bool = False, cfg=None) -> WeightVAE:
    experts = load_experts(run, expert_paths)
    schema = flat_schema(experts[0].schema.n_values, flat_token_dim(run)) if flat else None
    res = train_vae(experts, run.cfg.vae if cfg is None else cfg, run.cfg.base_seed, schema=schema)
    meta = dict(res.vae.metadata, upstream=run.provenance(expert_paths), losses=res.losses,
                experts=[e.env_id for e in experts])
    res.vae.save(out_path, meta)
    return WeightVAE.load(out_path)


def cmd_train_vae(run: Run) -> Path:
    run.check_output(run.vae_path)
    with run.timed("train_vae"):
        _fit_vae(run, run.expert_paths(), run.vae_path)
    return run.vae_path


def _val_scorer(run: Run, vae: WeightVAE, target_schema=None):
    """Mean RMSE of generated forecasters on the val environments (base seed)."""
    ds = run.dataset()
    envs = ds.by_split("val")

    def score(model: FlowModel) -> float:
        out = []
        for e in envs:
            ck, _ = generate_forecaster(vae, model, e.vector(), derived_seed(run.cfg.base_seed, env_index(e.id)),
                                        target_schema=target_schema)
            out.append(evaluate_rmse(ck.payload, ds.trajectories[e.id], ds.graph, run.cfg.forecaster))
        return float(np.mean(out))

    return score


def _fit_cfm(run: Run, vae_path: Path, out_path: Path, unconditional: bool = False,
             expert_paths=None, cfg=None, val_every: int | None = None) -> FlowModel:
    ds = run.dataset()
    vae = run.load_vae(vae_path)
    expert_paths = [run.out / rel for rel in vae.metadata["upstream"]] if expert_paths is None else expert_paths
    experts = load_experts(run, expert_paths)
    conds = [ds.env(e.env_id).vector() for e in experts]
    latents = encode_corpus(vae, experts, conds)
    normalizer = ConditionNormalizer.from_ranges(ds.total_ranges(), ds.coeff_names)
    target = derive_schema(run.cfg.forecaster) if vae.schema.is_flat else None
    every = run.cfg.evaluation.val_every if val_every is None else val_every
    scorer = _val_scorer(run, vae, target) if every and ds.by_split("val") else None
    res = train_cfm(latents, normalizer, run.cfg.cfm if cfg is None else cfg, run.cfg.base_seed,
                    validate=scorer, eval_every=every,
                    unconditional=unconditional)
    meta = {"upstream": run.provenance([vae_path]), "losses": res.losses,
            "val_scores": [[int(e), float(s)] for e, s in res.val_scores], "experts": [e.env_id for e in experts]}
    res.model.save(out_path, meta)
    return FlowModel.load(out_path)


def cmd_train_cfm(run: Run) -> Path:
    run.check_output(run.cfm_path)
    with run.timed("train_cfm"):
        _fit_cfm(run, run.vae_path, run.cfm_path)
    return run.cfm_path


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@lru_cache(maxsize=8)
def _models(vae_path: str, cfm_path: str, _stamp):
    return WeightVAE.load(vae_path), FlowModel.load(cfm_path)


def _generated_rmse_task(args):
    vae_path, cfm_path, stamp, e_vec, seed, traj, g, fcfg, flat = args
    vae, model = _models(vae_path, cfm_path, stamp)
    target = derive_schema(fcfg) if flat else None
    ck, _ = generate_forecaster(vae, model, e_vec, seed, target_schema=target)
    return evaluate_rmse(ck.payload, traj, g, fcfg)


def _oracle_task(args):
    traj, g, fcfg, tcfg, seed, init_seed = args
    ck = train_expert(traj, g, fcfg, seed, tcfg, init_seed=init_seed)
    return evaluate_rmse(ck.payload, traj, g, fcfg)


def test_envs(ds: Dataset):
    return [e for e in ds.environments if e.split in SPLIT_LABEL]


def generation_seed(seed: int, env_id: str) -> int:
    return derived_seed(seed, env_index(env_id))


def _generated_rows(run: Run, method: str, vae_path: Path, cfm_path: Path, envs, seeds,
                    perturb=None) -> list[list]:
    """Rows ``[method, split, env_id, seed, rmse]`` for generated forecasters.

    ``perturb(env, seed)`` returns the coefficient vector handed to the
    generator (defaults to the true coefficients).
    """
    ds = run.dataset()
    flat = run.load_vae(vae_path).schema.is_flat
    run.load_cfm(cfm_path)
    stamp = (file_hash(vae_path), file_hash(cfm_path))
    keys, tasks = [], []
    for e in envs:
        for s in seeds:
            vec = e.vector() if perturb is None else perturb(e, s)
            keys.append((e, s))
            tasks.append((str(vae_path), str(cfm_path), stamp, vec, generation_seed(s, e.id),
                          ds.trajectories[e.id], ds.graph, run.cfg.forecaster, flat))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rmses = pmap(_generated_rmse_task, tasks, run.parallelism)
    return [[method, SPLIT_LABEL[e.split], e.id, s, r] for (e, s), r in zip(keys, rmses)]


def _oracle_rows(run: Run, envs, seeds) -> list[list]:
    ds = run.dataset()
    cfg = run.cfg
    keys = [(e, s) for e in envs for s in seeds]
    tasks = [(ds.trajectories[e.id], ds.graph, cfg.forecaster, cfg.expert, s, cfg.base_seed) for e, s in keys]
    rmses = pmap(_oracle_task, tasks, run.parallelism)
    return [["one_per_env", SPLIT_LABEL[e.split], e.id, s, r] for (e, s), r in zip(keys, rmses)]


METRIC_HEADER = ["method", "split", "env_id", "seed", "rmse"]


def summarize(rows, keys=("method", "split")) -> list[list]:
    """Mean, population std and count of rmse grouped by ``keys``."""
    groups: dict = {}
    idx = [METRIC_HEADER.index(k) if k in METRIC_HEADER else k for k in keys]
    for r in rows:
        groups.setdefault(tuple(r[i] for i in idx), []).append(float(r[-1]))
    return [[*k, float(np.mean(v)), float(np.std(v)), len(v)] for k, v in sorted(groups.items())]


def _ablation_paths(run: Run, which: str) -> tuple[Path, Path]:
    if which == "condition":
        return run.vae_path, run.ablation_dir / "cfm_uncond.ck"
    if which == "tokenizer":
        return run.ablation_dir / "flat_vae.ck", run.ablation_dir / "flat_cfm.ck"
    raise ConfigError(f"unknown ablation {which!r}")


ABLATION_METHOD = {"condition": "unconditional", "tokenizer": "flat_tokenizer"}


def cmd_evaluate(run: Run, seeds=None) -> Path:
    """Metrics for every requested method on every test environment and seed."""
    seeds = tuple(run.cfg.seeds if seeds is None else seeds)
    ds = run.dataset()
    envs = test_envs(ds)
    methods = run.cfg.evaluation.methods
    rows = []
    with run.timed("evaluate"):
        if "fnfm" in methods:
            rows += _generated_rows(run, "fnfm", run.vae_path, run.cfm_path, envs, seeds)
        for which, method in ABLATION_METHOD.items():
            if method in methods:
                vae_p, cfm_p = _ablation_paths(run, which)
                rows += _generated_rows(run, method, vae_p, cfm_p, envs, seeds)
        if "one_per_env" in methods:
            rows += _oracle_rows(run, envs, seeds)
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    write_csv(run.eval_dir / "metrics.csv", METRIC_HEADER, rows)
    write_csv(run.eval_dir / "summary.csv", ["method", "split", "mean_rmse", "std_rmse", "count"], summarize(rows))
    return run.eval_dir / "metrics.csv"


def cmd_ablate(run: Run, which: str, seeds=None) -> Path:
    """Train the ablated model and tabulate it next to the full method."""
    seeds = tuple(run.cfg.seeds if seeds is None else seeds)
    vae_p, cfm_p = _ablation_paths(run, which)
    run.check_output(cfm_p)
    with run.timed(f"ablate_{which}"):
        if which == "tokenizer":
            _fit_vae(run, run.expert_paths(), vae_p, flat=True)
            _fit_cfm(run, vae_p, cfm_p)
        else:
            _fit_cfm(run, run.vae_path, cfm_p, unconditional=True)
        envs = test_envs(run.dataset())
        rows = _generated_rows(run, ABLATION_METHOD[which], vae_p, cfm_p, envs, seeds)
        rows += _generated_rows(run, "fnfm", run.vae_path, run.cfm_path, envs, seeds)
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    out = run.eval_dir / f"ablation_{which}.csv"
    write_csv(out, METRIC_HEADER, rows)
    write_csv(run.eval_dir / f"ablation_{which}_summary.csv", ["method", "split", "mean_rmse", "std_rmse", "count"],
              summarize(rows))
    return out


# ---------------------------------------------------------------------------
# robustness
# ---------------------------------------------------------------------------

ROBUST_HEADER = ["mode", "level", *METRIC_HEADER]


def data_ratio_subset(n: int, level: float, seed: int, sampling: str = "stratified") -> np.ndarray:
    """Sorted indices of the environments kept at ``level`` (at least 2).

    Indices are assumed ordered by coefficient. ``stratified`` splits them
    into ``keep`` contiguous strata and draws one index from each, so the
    subset spans the coefficient range; ``random`` draws uniformly.
    """
    if not 0.0 < level <= 1.0:
        raise ConfigError(f"data_ratio level {level} outside (0, 1]")
    keep = min(n, max(2, int(round(level * n))))
    if keep == n:
        return np.arange(n)
    rng = np.random.default_rng(derived_seed(seed, int(round(level * 1_000_000))))
    if sampling == "random":
        return np.sort(rng.choice(n, size=keep, replace=False))
    if sampling != "stratified":
        raise ConfigError(f"unknown data_ratio sampling {sampling!r}")
    return np.array([int(rng.choice(s)) for s in np.array_split(np.arange(n), keep)])


def retrain_subset(run: Run, expert_paths, tag: str, n_full: int | None = None) -> tuple[Path, Path]:
    """VAE and CFM on a corpus subset; with ``n_full`` the step budget of the full corpus is kept."""
    rdir = run.out / "robustness" / tag
    vae_p, cfm_p = rdir / "vae.ck", rdir / "cfm.ck"
    vcfg, ccfg, every = run.cfg.vae, run.cfg.cfm, run.cfg.evaluation.val_every
    if n_full is not None:
        n = len(expert_paths)
        vcfg = replace(vcfg, epochs=step_matched_epochs(vcfg.epochs, vcfg.batch, n_full, n))
        scale = step_matched_epochs(ccfg.epochs, ccfg.batch, n_full, n) / ccfg.epochs
        ccfg = replace(ccfg, epochs=int(round(ccfg.epochs * scale)))
        every = int(round(every * scale))
    _fit_vae(run, expert_paths, vae_p, cfg=vcfg)
    _fit_cfm(run, vae_p, cfm_p, expert_paths=expert_paths, cfg=ccfg, val_every=every)
    return vae_p, cfm_p


def cmd_robustness(run: Run, mode: str, levels=None, seeds=None) -> Path:
    seeds = tuple(run.cfg.seeds if seeds is None else seeds)
    rc = run.cfg.robustness
    ds = run.dataset()
    envs = test_envs(ds)
    rows = []
    with run.timed(f"robustness_{mode}"):
        if mode == "data_ratio":
            levels = tuple(rc.data_ratio_levels if levels is None else levels)
            for lv in levels:
                if not 0.0 < lv <= 1.0:
                    raise ConfigError(f"data_ratio level {lv} outside (0, 1]")
            # coefficient order, so that strata are contiguous coefficient ranges
            paths = sorted(run.expert_paths(), key=lambda p: (tuple(ds.env(p.stem).vector()), p.stem))
            for lv in levels:
                idx = data_ratio_subset(len(paths), lv, run.cfg.base_seed, rc.data_ratio_sampling)
                if len(idx) == len(paths):
                    # the full corpus is the main pipeline, trained with identical inputs and seeds
                    vae_p, cfm_p = run.vae_path, run.cfm_path
                else:
                    vae_p, cfm_p = retrain_subset(run, [paths[i] for i in idx], f"data_ratio_{lv:g}",
                                                  len(paths) if rc.match_steps else None)
                rows += [["data_ratio", lv, *r] for r in _generated_rows(run, "fnfm", vae_p, cfm_p, envs, seeds)]
        elif mode == "coeff_noise":
            levels = tuple(rc.coeff_noise_levels if levels is None else levels)
            ranges = ds.total_ranges()
            width = np.array([ranges[k][1] - ranges[k][0] for k in ds.coeff_names])
            for lv in levels:
                if lv < 0:
                    raise ConfigError(f"coeff_noise level {lv} is negative")

                def perturb(e, s, lv=lv):
                    # common random numbers: one unit draw per (env, seed), scaled by the level
                    unit = np.random.default_rng(derived_seed(s, env_index(e.id), 7)).standard_normal(len(width))
                    return e.vector() + lv * width * unit

                gen = _generated_rows(run, "fnfm", run.vae_path, run.cfm_path, envs, seeds, perturb)
                rows += [["coeff_noise", lv, *r] for r in gen]
        else:
            raise ConfigError(f"unknown robustness mode {mode!r}")
    rows.sort(key=lambda r: (r[1], r[2], r[3], r[4], r[5]))
    out = run.eval_dir / f"robustness_{mode}.csv"
    write_csv(out, ROBUST_HEADER, rows)
    summary = {}
    for r in rows:
        summary.setdefault((r[0], r[1], r[3]), []).append(float(r[-1]))
    write_csv(run.eval_dir / f"robustness_{mode}_summary.csv", ["mode", "level", "split", "mean_rmse", "std_rmse", "count"],
              [[*k, float(np.mean(v)), float(np.std(v)), len(v)] for k, v in sorted(summary.items())])
    return out


# ---------------------------------------------------------------------------
# latent export
# ---------------------------------------------------------------------------

@dataclass
class Pca:
    mean: np.ndarray
    components: np.ndarray  # (k, D)
    explained_variance: np.ndarray
    explained_ratio: np.ndarray

    def project(self, X) -> np.ndarray:
        return (np.asarray(X) - self.mean) @ self.components.T


def fit_pca(X, k: int = 2) -> Pca:
    """Exact PCA via SVD of the centered data matrix."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] < 3:
        raise ValueError(f"PCA needs at least 3 points, got {X.shape[0]}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    # fix the sign so the largest-magnitude loading of each component is positive
    signs = np.sign(vt[np.arange(vt.shape[0]), np.abs(vt).argmax(axis=1)])
    vt = vt * np.where(signs == 0, 1.0, signs)[:, None]
    var = s ** 2 / max(X.shape[0] - 1, 1)
    total = var.sum()
    k = min(k, vt.shape[0])
    ratio = var[:k] / total if total > 0 else np.zeros(k)
    return Pca(mean, vt[:k], var[:k], ratio)


def cmd_export_latents(run: Run, splits=None) -> Path:
    """Generate one flow per environment and project all paths on the end-point PCA."""
    ds = run.dataset()
    splits = tuple(run.cfg.evaluation.export_splits if splits is None else splits)
    vae = run.load_vae()
    model = run.load_cfm()
    envs = [e for e in ds.environments if e.split in splits]
    with run.timed("export_latents"):
        records = []
        for e in envs:
            _, rec = generate_latent(model, e.vector(), generation_seed(run.cfg.base_seed, e.id))
            records.append((e, rec))
        ends = np.stack([rec.states[-1].ravel() for _, rec in records])
        pca = fit_pca(ends, 2)
    rows = []
    last = len(records[0][1].states) - 1 if records else 0
    for e, rec in records:
        proj = pca.project(np.stack([z.ravel() for z in rec.states]))
        for k, (p1, p2) in enumerate(proj):
            role = "start" if k == 0 else ("end" if k == last else "path")
            rows.append([e.id, *[e.coeffs[c] for c in ds.coeff_names], k, p1, p2, role])
    out = write_csv(run.latents_dir / "paths.csv", ["env", *ds.coeff_names, "step", "pc1", "pc2", "role"], rows)
    write_csv(run.latents_dir / "pca.csv", ["component", "explained_variance", "explained_ratio"],
              [[i + 1, v, r] for i, (v, r) in enumerate(zip(pca.explained_variance, pca.explained_ratio))])
    pc1 = pca.project(ends)[:, 0]
    corr = []
    for c in ds.coeff_names:
        vals = np.array([e.coeffs[c] for e, _ in records])
        rho = float(spearmanr(pc1, vals).statistic) if np.ptp(vals) > 0 else float("nan")
        corr.append([c, rho])
    write_csv(run.latents_dir / "correlation.csv", ["coefficient", "spearman_pc1"], corr)
    return out


# ---------------------------------------------------------------------------
# whole pipeline
# ---------------------------------------------------------------------------

STAGES = ("simulate", "train_experts", "train_vae", "train_cfm")


def run_pipeline(run: Run, ablations=()) -> Run:
    """Upstream stages, then evaluation (ablations first when requested)."""
    with _lock(run.out):
        cmd_simulate(run)
        cmd_train_experts(run)
        cmd_train_vae(run)
        cmd_train_cfm(run)
        for which in ablations:
            cmd_ablate(run, which)
        cmd_evaluate(run)
    return run


def config_record(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)

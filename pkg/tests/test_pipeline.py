from __future__ import annotations

import shutil

import numpy as np
import pytest
from scipy.stats import spearmanr

from coefflow import cli
from coefflow.checkpoint import file_hash, load_checkpoint
from coefflow.config import tiny
from coefflow.dynamics import ConfigError, NumericError
from coefflow.pipeline import (
    Run, UpstreamError, cmd_evaluate, data_ratio_subset, derived_seed, fit_pca, fmt, read_csv, run_pipeline,
    step_matched_epochs, write_csv,
)

STAGES = [["simulate"], ["train-experts"], ["train-vae"], ["train-cfm"], ["ablate", "--which", "condition"],
          ["ablate", "--which", "tokenizer"], ["evaluate"], ["export-latents"],
          ["robustness", "--mode", "coeff_noise"], ["robustness", "--mode", "data_ratio"]]


def _cli(out, *args):
    return cli.main([args[0], "--config", "tiny", "--out", str(out), *args[1:]])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    for stage in STAGES:
        assert _cli(out, *stage) == 0, stage
    return out


def _rows(path, **match):
    return [r for r in read_csv(path) if all(r[k] == v for k, v in match.items())]


def test_layout(tiny_run):
    for rel in ["dataset/manifest", "experts/summary.csv", "vae/vae.ck", "cfm/cfm.ck", "eval/metrics.csv",
                "eval/summary.csv", "latents/paths.csv", "latents/pca.csv", "latents/correlation.csv",
                "eval/ablation_condition.csv", "eval/ablation_tokenizer.csv", "eval/robustness_coeff_noise.csv",
                "eval/robustness_data_ratio.csv"]:
        assert (tiny_run / rel).exists(), rel
    assert not (tiny_run / ".lock").exists()


def test_csvs_use_17_digits(tiny_run):
    text = (tiny_run / "eval" / "metrics.csv").read_text().splitlines()
    assert text[0] == "method,split,env_id,seed,rmse"
    assert fmt(0.1) == "0.10000000000000001"
    for line in text[1:]:
        assert float(line.rsplit(",", 1)[1]) > 0


def test_evaluate_is_byte_identical(tiny_run, tmp_path):
    out = tmp_path / "copy"
    shutil.copytree(tiny_run, out)
    first = (out / "eval" / "metrics.csv").read_bytes()
    assert _cli(out, "evaluate", "--force") == 0
    assert (out / "eval" / "metrics.csv").read_bytes() == first
    assert _cli(out, "evaluate", "--force", "--parallelism", "4") == 0
    assert (out / "eval" / "metrics.csv").read_bytes() == first
    assert (out / "eval" / "summary.csv").read_bytes() == (tiny_run / "eval" / "summary.csv").read_bytes()


def test_experts_match_across_parallelism(tiny_run, tmp_path):
    out = tmp_path / "par"
    shutil.copytree(tiny_run / "dataset", out / "dataset")
    assert _cli(out, "train-experts", "--parallelism", "4") == 0
    for p in sorted((tiny_run / "experts").glob("env*.ck")):
        assert file_hash(out / "experts" / p.name) == file_hash(p)


def test_provenance_chain(tiny_run):
    vae = load_checkpoint(tiny_run / "vae" / "vae.ck").metadata
    cfm = load_checkpoint(tiny_run / "cfm" / "cfm.ck").metadata
    assert cfm["upstream"] == {"vae/vae.ck": file_hash(tiny_run / "vae" / "vae.ck")}
    assert all(k.startswith("experts/") for k in vae["upstream"])
    ck = next(iter(sorted((tiny_run / "experts").glob("env*.ck"))))
    up = load_checkpoint(ck).metadata["upstream"]
    assert "dataset/manifest" in up


def test_stale_and_missing_upstream(tiny_run, tmp_path, capsys):
    out = tmp_path / "stale"
    shutil.copytree(tiny_run, out)
    ck = sorted((out / "experts").glob("env*.ck"))[0]
    ck.write_bytes(ck.read_bytes()[:-1] + b"\x01")
    assert _cli(out, "evaluate", "--force") == 3
    assert "changed" in capsys.readouterr().err
    assert _cli(tmp_path / "empty", "train-experts") == 3
    (out / "vae" / "vae.ck").unlink()
    assert _cli(out, "train-cfm", "--force") == 3


def test_exit_codes_for_config_errors(tiny_run, tmp_path, monkeypatch):
    assert _cli(tiny_run, "simulate") == 2  # outputs exist without --force
    bad = tmp_path / "bad.yaml"
    bad.write_text("config_version: 9\n")
    assert cli.main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["simulate", "--config", "tiny", "--out", str(tmp_path / "y"), "--parallelism", "0"]) == 2

    def boom(run):
        raise NumericError("diverged")

    monkeypatch.setattr(cli, "cmd_simulate", boom)
    assert cli.main(["simulate", "--config", "tiny", "--out", str(tmp_path / "z")]) == 4


def test_show_config(capsys):
    assert cli.main(["show-config", "tiny"]) == 0
    assert "config_version: 1" in capsys.readouterr().out


def test_noise_zero_and_full_ratio_reproduce_evaluate(tiny_run):
    fnfm = [(r["split"], r["env_id"], r["seed"], r["rmse"]) for r in _rows(tiny_run / "eval" / "metrics.csv",
                                                                               method="fnfm")]
    noise0 = [(r["split"], r["env_id"], r["seed"], r["rmse"])
              for r in _rows(tiny_run / "eval" / "robustness_coeff_noise.csv", level="0")]
    ratio1 = [(r["split"], r["env_id"], r["seed"], r["rmse"])
              for r in _rows(tiny_run / "eval" / "robustness_data_ratio.csv", level="1")]
    assert fnfm and sorted(noise0) == sorted(fnfm) and sorted(ratio1) == sorted(fnfm)
    noisy = _rows(tiny_run / "eval" / "robustness_coeff_noise.csv", level="0.20000000000000001")
    assert len(noisy) == len(fnfm)


def test_ablations_join_with_main_metrics(tiny_run):
    keys = {(r["split"], r["env_id"], r["seed"]) for r in _rows(tiny_run / "eval" / "metrics.csv", method="fnfm")}
    for which, method in [("condition", "unconditional"), ("tokenizer", "flat_tokenizer")]:
        rows = read_csv(tiny_run / "eval" / f"ablation_{which}.csv")
        assert {(r["split"], r["env_id"], r["seed"]) for r in rows if r["method"] == method} == keys


def test_methods_present_in_metrics(tiny_run):
    methods = {r["method"] for r in read_csv(tiny_run / "eval" / "metrics.csv")}
    assert {"fnfm", "one_per_env"} <= methods
    splits = {r["split"] for r in read_csv(tiny_run / "eval" / "metrics.csv")}
    assert splits == {"in_domain", "out_domain"}


def test_latent_export(tiny_run):
    rows = read_csv(tiny_run / "latents" / "paths.csv")
    roles = {r["role"] for r in rows}
    assert roles == {"start", "path", "end"}
    assert {"env", "step", "pc1", "pc2", "gamma"} <= set(rows[0])
    corr = read_csv(tiny_run / "latents" / "correlation.csv")
    assert {r["coefficient"] for r in corr} >= {"gamma"}


def test_evaluate_needs_ablation_checkpoints(tiny_run, tmp_path, capsys):
    out = tmp_path / "noabl"
    shutil.copytree(tiny_run, out)
    shutil.rmtree(out / "ablations")
    assert _cli(out, "evaluate", "--force") == 3
    assert "cfm_uncond.ck" in capsys.readouterr().err


def test_run_pipeline_api(tmp_path):
    run = Run(tiny(), out=tmp_path / "api")
    run_pipeline(run, ablations=("condition", "tokenizer"))
    assert run.cfm_path.exists() and set(run.timings) >= {"simulate", "train_experts"}
    with pytest.raises(UpstreamError):
        cmd_evaluate(Run(tiny(), out=tmp_path / "nothing"))


def test_data_ratio_subset():
    assert data_ratio_subset(10, 1.0, 0).tolist() == list(range(10))
    a = data_ratio_subset(40, 0.25, 3)
    assert len(a) == 10 and np.array_equal(a, data_ratio_subset(40, 0.25, 3))
    assert len(data_ratio_subset(5, 0.1, 0)) == 2
    assert np.all(np.diff(a) > 0)
    # stratified picks one index per contiguous stratum, random may leave gaps
    for k, stratum in enumerate(np.array_split(np.arange(40), 10)):
        assert a[k] in stratum
    r = data_ratio_subset(40, 0.25, 3, "random")
    assert len(r) == 10 and np.all(np.diff(r) > 0)
    with pytest.raises(ConfigError):
        data_ratio_subset(40, 0.25, 3, "grid")


def test_step_matched_epochs():
    # 28 samples at batch 8 take 4 steps per epoch, 7 samples take 1
    assert step_matched_epochs(300, 8, 28, 7) == 1200
    assert step_matched_epochs(300, 8, 28, 14) == 600
    assert step_matched_epochs(300, 8, 28, 28) == 300
    assert step_matched_epochs(100, 64, 28, 7) == 100


def test_derived_seed_and_csv(tmp_path):
    assert derived_seed(1, 2) == derived_seed(1, 2) != derived_seed(2, 1)
    p = write_csv(tmp_path / "a.csv", ["x", "y"], [[1, 1 / 3]])
    assert p.read_text() == "x,y\n1,0.33333333333333331\n"
    assert read_csv(p) == [{"x": "1", "y": "0.33333333333333331"}]


def test_pca_properties(rng):
    X = rng.standard_normal((20, 5)) * np.array([5.0, 2.0, 1.0, 0.5, 0.1])
    pca = fit_pca(X)
    P = pca.project(X)
    assert P.shape == (20, 2)
    np.testing.assert_allclose(P.var(axis=0, ddof=1), pca.explained_variance, rtol=1e-10)
    total = X.var(axis=0, ddof=1).sum()
    np.testing.assert_allclose(pca.explained_ratio, pca.explained_variance / total, rtol=1e-10)
    np.testing.assert_array_equal(pca.project(X[:1]), pca.project(X[:1].copy()))
    with pytest.raises(ValueError):
        fit_pca(X[:2])


def test_pca_affine_manifold(rng):
    e = np.linspace(0.0, 1.0, 11)
    u = rng.standard_normal(6)
    X = (2 * e - 1)[:, None] * u[None, :] + 1e-3 * rng.standard_normal((11, 6))
    pc1 = fit_pca(X).project(X)[:, 0]
    assert abs(spearmanr(pc1, e).statistic) > 0.9

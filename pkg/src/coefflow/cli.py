"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 upstream-artifact error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .config import PRESETS, dump_config, load_config
from .dynamics import ConfigError, DomainError, NumericError
from .pipeline import (
    Run, UpstreamError, _lock, cmd_ablate, cmd_evaluate, cmd_export_latents, cmd_robustness, cmd_simulate,
    cmd_train_cfm, cmd_train_experts, cmd_train_vae,
)

EXIT_OK, EXIT_CONFIG, EXIT_UPSTREAM, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("coefflow")


def _seed_list(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _levels(text: str) -> tuple:
    try:
        return tuple(float(s) for s in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True,
                        help="YAML config file, or a preset name (" + ", ".join(PRESETS) + ")")
    common.add_argument("--out", help="run directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="base seed (overrides base_seed)")
    common.add_argument("--seeds", type=_seed_list, help="evaluation seeds, e.g. 0,1,2")
    common.add_argument("--parallelism", type=int, default=1, help="worker processes for per-environment work")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--allow-failures", action="store_true", help="exclude diverged experts and exit 0")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coefflow", description="Coefficient-conditioned generation of forecaster weights.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [
        ("simulate", "integrate every environment and write the dataset"),
        ("train-experts", "train one forecaster per train environment"),
        ("train-vae", "train the weight VAE on the expert corpus"),
        ("train-cfm", "train the conditional flow in the VAE latent space"),
        ("evaluate", "score generated forecasters and baselines on test environments"),
        ("export-latents", "PCA projection of generated latent flow paths"),
    ]:
        sub.add_parser(name, parents=[common], help=text)
    a = sub.add_parser("ablate", parents=[common], help="train and score an ablation")
    a.add_argument("--which", choices=("tokenizer", "condition"), required=True)
    r = sub.add_parser("robustness", parents=[common], help="data-ratio or coefficient-noise study")
    r.add_argument("--mode", choices=("data_ratio", "coeff_noise"), required=True)
    r.add_argument("--levels", type=_levels, help="levels to run (default from config)")
    c = sub.add_parser("show-config", help="print a preset or config file with every hyperparameter")
    c.add_argument("config")
    return p


def resolve_config(ref: str):
    if ref in PRESETS and not Path(ref).exists():
        return PRESETS[ref]()
    return load_config(ref)


def make_run(args) -> Run:
    cfg = resolve_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["base_seed"] = args.seed
    if args.seeds is not None:
        changes["seeds"] = args.seeds
    if changes:
        cfg = dataclasses.replace(cfg, **changes)
    if args.parallelism < 1:
        raise ConfigError("--parallelism must be >= 1")
    return Run(cfg, out=args.out, parallelism=args.parallelism, force=args.force,
               allow_failures=args.allow_failures)


def dispatch(args) -> None:
    if args.command == "show-config":
        sys.stdout.write(dump_config(resolve_config(args.config)))
        return
    run = make_run(args)
    actions = {
        "simulate": lambda: cmd_simulate(run),
        "train-experts": lambda: cmd_train_experts(run),
        "train-vae": lambda: cmd_train_vae(run),
        "train-cfm": lambda: cmd_train_cfm(run),
        "evaluate": lambda: cmd_evaluate(run),
        "ablate": lambda: cmd_ablate(run, args.which),
        "robustness": lambda: cmd_robustness(run, args.mode, args.levels),
        "export-latents": lambda: cmd_export_latents(run),
    }
    with _lock(run.out):
        result = actions[args.command]()
    for stage, secs in run.timings.items():
        log.info("%s took %.1f s", stage, secs)
    if isinstance(result, list):
        result = run.experts_dir
    if result is not None:
        print(result)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except UpstreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UPSTREAM
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command line: ``grwm <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
The default output root is taken from ``GRWM_OUTPUT_ROOT`` (else ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import gradcheck, numcore
from .config import ConfigError, RunConfig, load_config, parse_overrides
from .latdyn import LatentDynamics, LatentWorldModel, OracleWorldModel
from .mazeworld import frame_strip, write_ppm
from .numcore import CheckpointFormatError, ContractViolation, NumericFailure
from .repmodel import TemporalVAE, rep_digest
from .trajectories import (
    ConfigMismatchError,
    DatasetFormatError,
    coverage_report,
    read_dataset,
    replay_matches,
    write_dataset,
)

log = logging.getLogger("grwm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ENV = "GRWM_OUTPUT_ROOT"


class DataError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def run_dir(cfg: RunConfig, args, name: str) -> Path:
    if getattr(args, "out_dir", None):
        d = Path(args.out_dir)
    elif cfg.run.output_dir:
        d = Path(cfg.run.output_dir)
    else:
        d = Path(os.environ.get(OUTPUT_ENV, "runs")) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_resolved(cfg: RunConfig, directory: Path) -> None:
    (directory / "config.resolved").write_text(cfg.to_text())


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def fmt(v) -> str:
    return repr(float(v))


def open_dataset(path: str, cfg: RunConfig):
    try:
        ds = read_dataset(path, cfg.env.env_config())
    except ConfigMismatchError:
        raise
    except (DatasetFormatError, OSError) as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    d = cfg.data
    if (ds.maze_width, ds.maze_height, ds.map_seed) != (d.maze_width, d.maze_height, d.maze_seed):
        raise ConfigMismatchError("dataset maze differs from data.maze_* settings")
    return ds


def open_rep(path: str, cfg: RunConfig, frame_hw) -> TemporalVAE:
    try:
        rep = TemporalVAE.load(path)
    except (OSError, CheckpointFormatError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    expected = TemporalVAE(**cfg.rep_params()).rep_config(frame_hw)
    if rep_digest(expected) != rep_digest(rep.rep_config_):
        raise ConfigMismatchError(f"checkpoint {path} was trained with a different representation config")
    return rep


def open_dyn(path: str) -> LatentDynamics:
    try:
        return LatentDynamics.load(path)
    except (OSError, CheckpointFormatError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else run_dir(cfg, args, "data") / "dataset.grwd"
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = ex.make_dataset(cfg)
    try:
        write_dataset(out, ds)
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc}") from exc
    maze, env = ds.maze(), cfg.env.env_config()
    report = coverage_report(ds)
    report["replay_ok"] = all(replay_matches(maze, env, ds.trajectory(n)) for n in range(len(ds)))
    report["trajectories"], report["length"] = len(ds), ds.T
    write_json(out.with_suffix(".report.json"), report)
    write_resolved(cfg, out.parent)
    print(f"wrote {out}: {len(ds)} x {ds.T}, coverage {report['coverage']:.0%}, replay ok: {report['replay_ok']}")
    return EXIT_OK


def cmd_train_ae(cfg: RunConfig, args) -> int:
    ds = open_dataset(args.data, cfg)
    tr, _ = ex.data_split(cfg, ds)
    directory = run_dir(cfg, args, "train-ae")
    out = Path(args.out) if args.out else directory / "ae.grwm"
    params = cfg.rep_params()
    params["warmup"] = min(params["warmup"], params["n_steps"])
    rep = TemporalVAE(**params)
    rows = []
    try:
        rep.fit(ds.frames[tr], callback=lambda row, _: rows.append(row))
    except NumericFailure:
        # parameters are untouched by the failing step, so they are the last good ones
        rep.net_.eval()
        rep.save(out.with_suffix(".last-good.grwm"))
        raise
    finally:
        if rows:
            keys = list(rows[0])
            write_csv(directory / "train_log.csv", keys, [[r[k] for k in keys] for r in rows])
    rep.save(out)
    summary = rep.loss_report(ds.frames[tr], seed=cfg.run.seed).as_row()
    write_json(directory / "summary.json", {"checkpoint": str(out), "final": summary})
    write_resolved(cfg, directory)
    print(f"wrote {out}; " + ", ".join(f"{k}={v:.5g}" for k, v in summary.items()))
    return EXIT_OK


def cmd_train_dyn(cfg: RunConfig, args) -> int:
    ds = open_dataset(args.data, cfg)
    tr, _ = ex.data_split(cfg, ds)
    directory = run_dir(cfg, args, "train-dyn")
    out = Path(args.out) if args.out else directory / "dyn.grwm"
    backend = cfg.dynamics.backend
    digest = None
    if backend == "oracle":
        dyn = ex.train_oracle(cfg, ds)
    else:
        if not args.ae:
            raise ConfigError("--ae checkpoint required for latent backends")
        rep = open_rep(args.ae, cfg, ds.frames.shape[2:4])
        digest = rep_digest(rep.rep_config_)
        dyn = ex.train_dynamics(cfg, rep.transform(ds.frames[tr]), ds.actions[tr])
    dyn.save(out, rep_digest=digest)
    write_csv(directory / "dyn_log.csv", ["step", "loss"], [[i + 1, fmt(v)] for i, v in enumerate(dyn.history_)])
    write_resolved(cfg, directory)
    print(f"wrote {out}; final loss {dyn.history_[-1]:.5g}")
    return EXIT_OK


def _parse_models(items: list[str]) -> list[tuple[str, str, str | None]]:
    out = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--model expects NAME=AE[:DYN], got {item!r}")
        name, paths = item.split("=", 1)
        ae, _, dyn = paths.partition(":")
        out.append((name, ae, dyn or None))
    return out


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = open_dataset(args.data, cfg)
    directory = run_dir(cfg, args, "eval")
    horizon = args.horizon if args.horizon is not None else cfg.eval.horizon
    n_eps = args.episodes if args.episodes is not None else cfg.eval.episodes
    if horizon < 0 or n_eps < 1:
        raise ConfigError("horizon must be >= 0 and episodes >= 1")
    models = _parse_models(args.model or [])
    if not models and not args.oracle:
        raise ConfigError("nothing to evaluate: pass --model and/or --oracle")
    seed = cfg.run.seed
    metrics: dict = {"horizon": horizon, "episodes": n_eps, "models": {}}
    episodes = None
    if not args.probe_only:
        episodes = ex.make_episodes(ds.maze(), cfg.env.env_config(), n_eps, cfg.eval.context_frames, horizon, cfg.data.epsilon, seed)
    curves, preds, cluster_rows = {}, {}, []
    _, va = ex.data_split(cfg, ds)
    for name, ae_path, dyn_path in models:
        rep = open_rep(ae_path, cfg, ds.frames.shape[2:4])
        ev = ex.evaluate_representation(cfg, rep, ds, seed)
        entry = ev.to_dict()
        pos = ds.poses[va].reshape(-1, 3)
        cluster_rows += [[name, i, fmt(p[0]), fmt(p[1]), int(c)] for i, (p, c) in enumerate(zip(pos, ev.assignments))]
        if episodes is not None and dyn_path:
            dyn = open_dyn(dyn_path)
            if dyn.rep_digest_ != rep_digest(rep.rep_config_):
                raise ConfigMismatchError(f"{dyn_path} was trained on a different representation")
            curve, preds[name] = ex.rollout_curve(LatentWorldModel(rep, dyn), episodes, cfg.eval.aggregate, seed)
            curves[name] = curve
            entry["rollout"] = _curve_summary(curve)
        metrics["models"][name] = entry
    if args.oracle and episodes is not None:
        world = OracleWorldModel(open_dyn(args.oracle), ds.maze(), cfg.env.env_config())
        curve, preds["oracle"] = ex.rollout_curve(world, episodes, cfg.eval.aggregate)
        curves["oracle"] = curve
        metrics["models"]["oracle"] = {"rollout": _curve_summary(curve)}
    write_json(directory / "metrics.json", metrics)
    if curves:
        names = list(curves)
        rows = [[t + 1] + [fmt(curves[n].values[t]) for n in names] for t in range(horizon)]
        write_csv(directory / "curves.csv", ["t"] + names, rows)
    if cluster_rows:
        write_csv(directory / "clusters.csv", ["model", "frame", "x", "y", "cluster"], cluster_rows)
    if episodes is not None and preds and horizon > 0:
        for e in range(min(cfg.eval.strips, n_eps)):
            cols = np.linspace(0, horizon - 1, min(horizon, 8)).round().astype(int)
            rows = [episodes.truth()[e][cols]] + [np.rint(preds[n][e][cols] * 255).astype(np.uint8) for n in preds]
            write_ppm(directory / f"strip_{e:02d}.ppm", frame_strip(rows))
    write_resolved(cfg, directory)
    print(f"wrote {directory / 'metrics.json'}")
    return EXIT_OK


def _curve_summary(curve) -> dict:
    d = curve.to_dict()
    h = curve.horizon
    d["mean_all"] = float(np.mean(curve.values)) if h else None
    if h >= 63:
        d["mean_t32_63"] = curve.window_mean(32, 63)
    return d


SUITES = {
    "losses": [("vanilla", "vanilla", {}), ("full", "grwm", {}), ("no_uniform", "no_uniform", {}), ("no_slow", "no_slow", {})],
    "projection": [("with_head", "grwm", {}), ("without_head", "no_head", {})],
    "slow-mode": [("all_pairs", "grwm", {}), ("adjacent", "adjacent", {})],
    "latent-dim": [
        (f"{v}_d{d}", v, {"latent_dim": d}) for d in (16, 32, 64, 128) for v in ("vanilla", "grwm")
    ],
}


def cmd_ablate(cfg: RunConfig, args) -> int:
    ds = open_dataset(args.data, cfg)
    tr, _ = ex.data_split(cfg, ds)
    directory = run_dir(cfg, args, f"ablate-{args.suite}")
    header = ["variant", "status", "L_recon", "L_KL", "L_slow", "L_uniform", "probe_mse", "dispersion", "recon_mse"]
    rows = []
    for label, variant, overrides in SUITES[args.suite]:
        try:
            rep = ex.train_representation(cfg, ds.frames[tr], variant, **overrides)
            ev = ex.evaluate_representation(cfg, rep, ds, cfg.run.seed)
            d = ev.diagnostics
            rows.append([label, "ok", fmt(d["L_recon"]), fmt(d["L_KL"]), fmt(d["L_slow"]), fmt(d["L_uniform"]),
                         fmt(ev.probe["mse"]), fmt(ev.clusters["dispersion"]), fmt(ev.recon_mse)])
        except (NumericFailure, ContractViolation) as exc:
            log.error("variant %s failed: %s", label, exc)
            rows.append([label, f"failed: {type(exc).__name__}"] + [""] * (len(header) - 2))
        print(f"{label}: {rows[-1][1]}", flush=True)
    write_csv(directory / "ablation.csv", header, rows)
    write_resolved(cfg, directory)
    print(f"wrote {directory / 'ablation.csv'}")
    return EXIT_OK


def cmd_grad_check(cfg: RunConfig, args) -> int:
    results = gradcheck.run_suite(tol=args.tol, seed=cfg.run.seed)
    if args.corrupt:
        results += gradcheck.run_suite([gradcheck.corrupted_case()], tol=args.tol)
    print(gradcheck.format_report(results))
    bad = [r.name for r in results if not r.passed]
    if bad:
        print("failing gradients: " + ", ".join(bad), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="grwm", description="Geometrically regularized world models on procedural mazes.")
    p.add_argument("--config", help="config file with 'section.key = value' lines")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out-dir", help="run directory (default: $%s/<subcommand>)" % OUTPUT_ENV)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="collect a noisy-A* trajectory dataset")
    s.add_argument("--out", help="dataset path")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train-ae", help="train a representation model")
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="checkpoint path")
    s.add_argument("--vanilla", action="store_true", help="zero beta and both regularizer weights")
    s.add_argument("--slow-mode", choices=["all_pairs", "adjacent"])
    s.add_argument("--no-head", action="store_true", help="regularize z directly, without a projection head")
    s.set_defaults(func=cmd_train_ae)

    s = sub.add_parser("train-dyn", help="train latent (or oracle) dynamics")
    s.add_argument("--data", required=True)
    s.add_argument("--ae", help="representation checkpoint (not used by the oracle backend)")
    s.add_argument("--out", help="checkpoint path")
    s.add_argument("--backend", choices=["regressor", "diffusion", "oracle"])
    s.set_defaults(func=cmd_train_dyn)

    s = sub.add_parser("eval", help="rollout curves, probes and clusters")
    s.add_argument("--data", required=True)
    s.add_argument("--model", action="append", metavar="NAME=AE[:DYN]")
    s.add_argument("--oracle", help="oracle dynamics checkpoint")
    s.add_argument("--horizon", type=int)
    s.add_argument("--episodes", type=int)
    s.add_argument("--probe-only", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and compare a suite of variants")
    s.add_argument("--data", required=True)
    s.add_argument("--suite", required=True, choices=sorted(SUITES))
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("grad-check", help="finite-difference gradient suite")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--corrupt", action="store_true", help="include a deliberately wrong gradient")
    s.set_defaults(func=cmd_grad_check)
    return p


def _flag_overrides(args) -> dict:
    out = {}
    if getattr(args, "vanilla", False):
        out.update({"loss.beta": 0.0, "loss.lambda_slow": 0.0, "loss.lambda_uniform": 0.0})
    if getattr(args, "slow_mode", None):
        out["loss.slow_mode"] = args.slow_mode
    if getattr(args, "no_head", False):
        out["loss.proj_mode"] = "without_head"
    if getattr(args, "backend", None):
        out["dynamics.backend"] = args.backend
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = cfg.with_overrides({**parse_overrides(args.set), **_flag_overrides(args)})
        numcore.set_strict(cfg.run.strict)
        return args.func(cfg, args)
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ContractViolation as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

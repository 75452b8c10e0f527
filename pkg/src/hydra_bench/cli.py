"""Command-line entry point: ``hydra-bench <command> ...``.

Commands
    gen-data   render the synthetic multiview dataset
    train      fit a victim detector (conv or attn)
    attack     optimize or draw a patch against a victim
    evaluate   clean / attacked metrics, transfer matrix and attacked-views sweep
    report     curves, transfer matrix, summary table and figures from evaluate runs

Every command writes ``manifest.json`` next to its outputs with the resolved
config and the content hash of each input. Errors exit with status 2.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .attack import load_patch, save_patch
from .config import ALG1, ALG2, MODES, ExperimentConfig, load_config
from .detector.models import ATTN, CONV
from .detector.training import load_weights, save_weights, train, write_loss_csv
from .errors import ConfigInvalid, EmptyResults, HydraError, SchemaMismatch, WrongVictim
from .evaluation.experiments import (
    AttackReport,
    evaluate,
    evaluate_trajectory,
    make_report,
    read_reports_json,
    write_metrics_csv,
    write_reports_csv,
    write_reports_json,
    write_sweep_csv,
)
from .pipeline import generate_patch, placement_of, spec_from_manifest
from .provenance import hash_path, write_manifest
from .scene import generate_dataset, load_dataset, persist_dataset

logger = logging.getLogger("hydra_bench")

THREADS_ENV = "HYDRA_BENCH_THREADS"
WEIGHTS_FILE = "weights.pt"


def configure_threads(env=None) -> int | None:
    """Cap torch's intra-op threads from ``HYDRA_BENCH_THREADS`` if it is set."""
    value = (os.environ if env is None else env).get(THREADS_ENV)
    if value in (None, ""):
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigInvalid(f"{THREADS_ENV} must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigInvalid(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    torch.set_num_threads(n)
    return n


def _resolve(args) -> ExperimentConfig:
    return load_config(args.config)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _weights_path(p) -> Path:
    p = Path(p)
    return p / WEIGHTS_FILE if p.is_dir() else p


def _name(path) -> str:
    p = Path(path)
    return p.parent.name if p.name == WEIGHTS_FILE else p.stem if p.is_file() else p.name


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    seed = cfg.seed if args.seed is None else args.seed
    start = time.perf_counter()
    out = _out(args)
    frames = generate_dataset(cfg.scene, seed)
    persist_dataset(frames, out, cfg.scene, seed, cfg.scene.rig())
    write_manifest(out, "gen-data", cfg.to_dict(), {"config": args.config},
                   {"seed": seed, "n_frames": len(frames)}, time.perf_counter() - start)
    print(f"wrote {len(frames)} frames ({cfg.scene.n_train} train / {cfg.scene.n_test} test) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    det = cfg.detector(args.variant)
    if args.seed is not None:
        det = dataclasses.replace(det, seed=args.seed)
    data = load_dataset(args.data)
    out = _out(args)
    weights = train(data.train, det, data.calibs, data.grid,
                    progress=lambda r: logger.info("epoch %d total %.4f", r["epoch"], r["total"]))
    save_weights(weights, out / WEIGHTS_FILE)
    write_loss_csv(weights.history, out / "loss.csv")
    write_manifest(out, "train", cfg.to_dict(), {"config": args.config, "data": args.data},
                   {"detector": det.to_dict(), "weights_digest": weights.digest()}, weights.train_seconds)
    print(f"trained {det.variant} victim in {weights.train_seconds:.1f}s -> {out / WEIGHTS_FILE}")
    return 0


def cmd_attack(args) -> int:
    cfg = _resolve(args)
    weights_path = _weights_path(args.victim)
    weights = load_weights(weights_path)
    expected = ATTN if args.mode == ALG2 else CONV
    if weights.architecture != expected and not args.allow_mismatch:
        raise WrongVictim(f"--mode {args.mode} targets a {expected!r} victim, got {weights.architecture!r} "
                          "(pass --allow-mismatch for transfer experiments)")
    data = load_dataset(args.data)
    seed = cfg.attack(args.mode).seed if args.seed is None else args.seed
    views = None if args.views_attacked is None else list(range(args.views_attacked))
    if views is not None and args.mode != ALG1:
        raise ConfigInvalid("--views-attacked applies to --mode alg1 during attack")
    start = time.perf_counter()
    result = generate_patch(args.mode, weights, data.train, cfg, seed, views, args.allow_mismatch)
    out = _out(args)
    final = result.log[-1] if result.log else {}
    manifest = {
        "schema_version": 1,
        "mode": args.mode,
        "seed": seed,
        "views_attacked": views,
        "placement": placement_of(args.mode, cfg, weights),
        "victim": {"path": str(weights_path), "architecture": weights.architecture, "digest": weights.digest(),
                   "sha256": hash_path(weights_path)},
        "config": cfg.to_dict(),
        "final_losses": {k: final[k] for k in ("ground", "single_view_mean", "attention", "total") if k in final},
    }
    save_patch(out, result.patch, manifest, result.log, result.checkpoints)
    result.patch.values.astype("<f8").tofile(out / "patch.raw")
    # the patch manifest doubles as the run manifest; add provenance hashes
    write_manifest(out, "attack", cfg.to_dict(), {"config": args.config, "data": args.data, "victim": weights_path},
                   {k: v for k, v in manifest.items() if k != "config"}, time.perf_counter() - start)
    print(f"{args.mode} patch ({result.patch.psize[0]}x{result.patch.psize[1]}) -> {out}")
    return 0


def _load_spec(path):
    patch, manifest, checkpoints = load_patch(path)
    if "placement" not in manifest:
        raise SchemaMismatch(f"{path} has no placement record in its manifest")
    return spec_from_manifest(patch, manifest["placement"], checkpoints)


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    data = load_dataset(args.data)
    frames = data.test
    victims = {_name(v): load_weights(_weights_path(v)) for v in args.victim}
    patches = {_name(p): _load_spec(p) for p in (args.patch or [])}
    out = _out(args)
    start = time.perf_counter()
    views = None if args.views_attacked is None else list(range(args.views_attacked))
    clean_rows, reports, sweep = [], [], []
    for vname, w in victims.items():
        clean = evaluate(w, frames, None, config=cfg.eval)
        clean_rows.append({"victim": vname, **clean.to_dict()})
        for pname, spec in patches.items():
            attacked = evaluate(w, frames, spec, config=cfg.eval, views=views)
            traj = evaluate_trajectory(w, frames, spec, cfg.eval) if spec.checkpoints and views is None else []
            reports.append(make_report(vname, pname, clean, attacked, traj))
            ks = range(w.model.n_views + 1) if args.sweep and views is None else []
            for k in ks:
                m = clean if k == 0 else evaluate(w, frames, spec, config=cfg.eval, views=list(range(k)))
                sweep.append({"victim": vname, "patch": pname, "k": k, "moda": m.moda, "recall": m.recall,
                              "precision": m.precision, "modp": m.modp})
    _write_rows(out / "clean_metrics.csv", clean_rows)
    if reports:
        write_reports_csv(reports, out / "reports.csv")
        write_reports_json(reports, out / "reports.json")
    if sweep:
        write_sweep_csv(sweep, out / "sweep.csv")
    if len(victims) == 1 and not patches:
        write_metrics_csv(clean, out / "metrics.csv")
    inputs = {"config": args.config, "data": args.data}
    inputs.update({f"victim:{k}": _weights_path(v) for k, v in zip(victims, args.victim)})
    inputs.update({f"patch:{k}": p for k, p in zip(patches, args.patch or [])})
    write_manifest(out, "evaluate", cfg.to_dict(), inputs, {"views_attacked": views}, time.perf_counter() - start)
    for r in reports:
        drop = "n/a" if r.moda_drop_relative is None else f"{100 * r.moda_drop_relative:.1f}%"
        print(f"{r.patch} vs {r.victim}: MODA {r.clean.moda:.3f} -> {r.attacked.moda:.3f} ({drop} drop)")
    for row in clean_rows:
        print(f"clean {row['victim']}: MODA {row['moda']:.3f} recall {row['recall']:.3f}")
    return 0


def _write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def _read_sweep(path):
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({"victim": r["victim"], "patch": r["patch"], "k": int(r["k"]),
                         **{m: float(r[m]) if r[m] != "" else None for m in ("moda", "recall", "precision", "modp")}})
    return rows


def build_report(results_dirs, out) -> dict:
    """Curves, sweep, transfer matrix and summary from one or more evaluate directories."""
    reports: list[AttackReport] = []
    sweep = []
    for d in results_dirs:
        d = Path(d)
        if (d / "reports.json").exists():
            reports.extend(read_reports_json(d / "reports.json"))
        if (d / "sweep.csv").exists():
            sweep.extend(_read_sweep(d / "sweep.csv"))
    if not reports:
        raise EmptyResults("no attack reports found in " + ", ".join(str(d) for d in results_dirs))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    curves = [{"victim": r.victim, "patch": r.patch, **row} for r in reports for row in r.trajectory]
    _write_rows(out / "curves.csv", curves)
    if sweep:
        write_sweep_csv(sweep, out / "sweep.csv")

    patch_names = sorted({r.patch for r in reports})
    victim_names = sorted({r.victim for r in reports})
    drops = np.full((len(patch_names), len(victim_names)), np.nan)
    for r in reports:
        if r.moda_drop_relative is not None:
            drops[patch_names.index(r.patch), victim_names.index(r.victim)] = r.moda_drop_relative
    with open(out / "transfer_matrix.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patch"] + victim_names)
        for i, p in enumerate(patch_names):
            w.writerow([p] + ["" if np.isnan(x) else f"{x:.6f}" for x in drops[i]])

    lines = ["# Attack summary", "",
             "| patch | victim | clean MODA | attacked MODA | clean recall | attacked recall | MODA drop | recall drop |",
             "|---|---|---|---|---|---|---|---|"]

    def pct(x):
        return "n/a" if x is None else f"{100 * x:.1f}%"

    def num(x):
        return "n/a" if x is None else f"{x:.3f}"

    for r in sorted(reports, key=lambda r: (r.patch, r.victim)):
        lines.append(f"| {r.patch} | {r.victim} | {num(r.clean.moda)} | {num(r.attacked.moda)} | "
                     f"{num(r.clean.recall)} | {num(r.attacked.recall)} | {pct(r.moda_drop_relative)} | "
                     f"{pct(r.recall_drop_relative)} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")

    figures = out / "figures"
    if curves:
        plotting.plot_trajectories(curves, figures / "trajectories.png")
    if sweep:
        plotting.plot_sweep(sweep, figures / "sweep.png")
    plotting.plot_transfer_matrix(patch_names, victim_names, drops, figures / "transfer_matrix.png")
    return {"reports": len(reports), "curves": len(curves), "sweep": len(sweep)}


def cmd_report(args) -> int:
    start = time.perf_counter()
    out = Path(args.out) if args.out else Path(args.results[0]) / "report"
    counts = build_report(args.results, out)
    write_manifest(out, "report", {}, {f"results:{i}": d for i, d in enumerate(args.results)}, counts,
                   time.perf_counter() - start)
    print(f"report for {counts['reports']} attack reports -> {out}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hydra-bench", description="Desk-scale multiview adversarial patch benchmark.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the config seed for this command")

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a victim detector")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")
    p.add_argument("--variant", choices=[CONV, ATTN], required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="generate a patch")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--victim", required=True, help="weights file or train output directory")
    p.add_argument("--mode", choices=MODES, default=ALG1)
    p.add_argument("--views-attacked", type=int, default=None, metavar="k",
                   help="alg1 only: place the patch in views 0..k-1")
    p.add_argument("--allow-mismatch", action="store_true", help="attack a victim of the other architecture")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="clean and attacked metrics")
    common(p, seed=False)
    p.add_argument("--data", required=True)
    p.add_argument("--victim", action="append", required=True, help="repeatable")
    p.add_argument("--patch", action="append", help="patch directory, repeatable")
    p.add_argument("--views-attacked", type=int, default=None, metavar="k",
                   help="apply patches in views 0..k-1 only (skips the sweep)")
    p.add_argument("--no-sweep", dest="sweep", action="store_false", help="skip the attacked-views sweep")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="curves, transfer matrix and figures")
    p.add_argument("results", nargs="+", help="evaluate output directories")
    p.add_argument("--out", default=None, help="default: <first results dir>/report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        configure_threads()
        views = getattr(args, "views_attacked", None)
        if views is not None and views < 0:
            raise ConfigInvalid("--views-attacked must be >= 0")
        return args.func(args)
    except (HydraError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

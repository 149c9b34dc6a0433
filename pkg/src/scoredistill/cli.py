"""Command-line entry point: ``scoredistill <subcommand> [options]``.

Every experiment subcommand writes ``<name>.csv`` (records), ``<name>.json``
(summary with the config hash and the CSV digest) and, unless figures are
disabled, ``<name>.svg`` into the output directory.  ``report`` merges those
into ``report.json`` / ``report.csv`` with one row per acceptance criterion.

Exit codes: 0 ok, 2 configuration error, 3 numerical abort or failed
self-check, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import acceptance, artifacts, bench, guidance
from .bench import Record, SweepResult
from .config import (ConfigError, bias_config, config_hash, distill_config,
                     load_config, sched_args, world_config)
from .distill import NumericalAbort, build_oracles, distill_run
from .scene import input_view, make_world, render
from .schedule import make_linear_schedule

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

SUBCOMMANDS = ("oracle-check", "denoise-bench", "gap-curve", "lambda-sweep",
               "alpha-sweep", "engine-compare", "sampler-compare", "distill",
               "sample", "report")

# Published denoising numbers (PSNR / SSIM / LPIPS per noise level) for the
# base unconditional, the train-matched null embedding and the zero
# embedding.  They are carried into reports as annotations and never
# compared with toy results.
REFERENCE_DENOISE_TABLE = {
    "exact": {50: (40.26, 0.992, 0.008), 100: (36.94, 0.988, 0.014),
              200: (33.99, 0.981, 0.023), 300: (31.98, 0.974, 0.027)},
    "train_matched": {50: (36.17, 0.981, 0.015), 100: (34.85, 0.979, 0.024),
                      200: (33.07, 0.975, 0.031), 300: (30.44, 0.969, 0.046)},
    "inference_zero": {50: (36.13, 0.979, 0.015), 100: (34.70, 0.970, 0.026),
                       200: (32.76, 0.973, 0.033), 300: (29.94, 0.963, 0.055)},
}

EXPERIMENT_FILES = {
    "oracle-check": "oracle_check", "denoise-bench": "denoise",
    "gap-curve": "gap", "lambda-sweep": "lambda_sweep",
    "alpha-sweep": "alpha_sweep", "engine-compare": "engine_compare",
    "sampler-compare": "sampler_compare", "distill": "distill", "sample": "sample",
}


class MissingArtifact(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# experiment runners; each returns (SweepResult, extra summary fields)

def _common(cfg):
    return dict(world_cfg=world_config(cfg), bias=bias_config(cfg),
                sched_args=sched_args(cfg))


def run_oracle_check(cfg, args):
    checks = acceptance.oracle_checks(seed=cfg["seed"])
    records = []
    for name, c in checks.items():
        records.append(Record("oracle_check", name, cfg["seed"], "value", c["value"]))
        records.append(Record("oracle_check", name, cfg["seed"], "pass", float(c["pass"])))
    res = SweepResult("oracle_check", list(checks), records, "pass")
    failures = sum(not c["pass"] for c in checks.values())
    return res, {"failures": failures, "checks": checks}


def run_denoise(cfg, args):
    b = cfg["bench"]
    c = _common(cfg)
    res = bench.denoise_benchmark(b["predictors"], b["T_levels"], b["n_seeds"],
                                  c["sched_args"], c["world_cfg"], c["bias"],
                                  eta=b["eta"], first_seed=cfg["seed"])
    return res, {}


def run_gap(cfg, args):
    b = cfg["bench"]
    res = bench.gap_curve(b["predictors"], b["T_levels"], b["gap_n"], cfg["seed"],
                          b["gap_dim"], bias_config(cfg),
                          make_linear_schedule(*sched_args(cfg)))
    return res, {}


def run_lambda(cfg, args):
    b = cfg["bench"]
    res = bench.lambda_sweep(b["lambdas"], distill_config(cfg), b["n_seeds"],
                             first_seed=cfg["seed"], **_common(cfg))
    return res, {}


def run_alpha(cfg, args):
    b = cfg["bench"]
    grid = bench.alpha_grid_around(cfg["distill"]["omega"], b["alpha_step"])
    res = bench.alpha_sweep(grid, distill_config(cfg), b["n_seeds"],
                            first_seed=cfg["seed"], **_common(cfg))
    return res, {}


def run_engines(cfg, args):
    b = cfg["bench"]
    res = bench.engine_compare(b["engines"], distill_config(cfg), b["n_seeds"],
                               variance_n=b["variance_n"],
                               variance_t_frac=b["variance_t_frac"],
                               first_seed=cfg["seed"], **_common(cfg))
    return res, {}


def run_sampler(cfg, args):
    b = cfg["bench"]
    res = bench.sampler_compare(
        ("collapsed", "rectified", "collapsed@off", "rectified@off"),
        b["sampler_seeds"], cfg["distill"]["omega"], b["sampler_steps"], b["eta"],
        b["sampler_world_seed"], pose_offset=b["sampler_pose_offset"],
        first_seed=cfg["seed"], **_common(cfg))
    return res, {}


def run_distill(cfg, args, out: Path):
    world = make_world(cfg["seed"], world_config(cfg))
    oracles = build_oracles(world, bias_config(cfg))
    dcfg = distill_config(cfg)
    run = distill_run(world, oracles, dcfg, make_linear_schedule(*sched_args(cfg)))
    rep = bench.metric_report(run.theta.clip(0.0, 1.0), world.gt)
    y, pose = input_view(world)
    iv = float(np.linalg.norm(render(run.theta, pose, world) - y) / np.sqrt(world.d))
    cell = dcfg.engine.value
    records = [Record("distill", cell, cfg["seed"], "psnr", rep.psnr),
               Record("distill", cell, cfg["seed"], "ssim", rep.ssim),
               Record("distill", cell, cfg["seed"], "mse", rep.mse),
               Record("distill", cell, cfg["seed"], "input_view_err", iv)]
    (out / "distill_trajectory.csv").write_bytes(artifacts.trajectory_csv(run))
    artifacts.save_grid(out / "theta", run.theta, world.n, world.d, world.seed)
    artifacts.save_grid(out / "gt", world.gt, world.n, world.d, world.seed)
    extra = {"files": ["distill_trajectory.csv", "theta.bin", "theta.csv",
                       "gt.bin", "gt.csv"]}
    if not args.no_figures and cfg["bench"]["figures"]:
        from . import figures
        figures.grid_heatmap(run.theta.clip(0, 1), out / "theta.svg", "estimate")
        figures.grid_heatmap(world.gt, out / "gt.svg", "ground truth")
        figures.trajectory_figure(run, out / "distill_trajectory.svg")
        extra["files"] += ["theta.svg", "gt.svg", "distill_trajectory.svg"]
    return SweepResult("distill", [cell], records, "psnr"), extra


def run_sample(cfg, args, out: Path):
    world = make_world(cfg["seed"], world_config(cfg))
    bias = bias_config(cfg)
    oracles = build_oracles(world, bias)
    sched = make_linear_schedule(*sched_args(cfg))
    pose = world.input_pose + cfg["bench"]["sampler_pose_offset"]
    truth = render(world.gt, pose, world)
    omega = cfg["distill"]["omega"] if args.omega is None else args.omega
    if args.combiner == "collapsed":
        f = guidance.guided_predictor(oracles.cond(pose), oracles.uncond_finetuned, omega)
    elif args.combiner == "rectified":
        f = guidance.guided_predictor(oracles.cond(pose), oracles.uncond_base, omega)
    else:
        gc = guidance.GuidanceConfig(cfg["distill"]["alpha1"], cfg["distill"]["alpha2"],
                                     omega, "general")
        f = guidance.guided_predictor(oracles.cond(pose), oracles.uncond_finetuned,
                                      cond_pose=oracles.cond_pose(pose), cfg=gc)
    if args.from_noise_level is None:
        start = guidance.FromPureNoise(world.d)
    else:
        start = guidance.FromNoisedLatent(truth, args.from_noise_level)
    seed = cfg["seed"] if args.seed is None else args.seed
    eta = cfg["bench"]["eta"] if args.eta is None else args.eta
    try:
        z = guidance.ddpm_sample(f, sched, start, steps=cfg["bench"]["sampler_steps"],
                                 seed=seed, eta=eta)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    dist = float(np.linalg.norm(z - truth) / np.sqrt(world.d))
    records = [Record("sample", args.combiner, seed, "distance", dist)]
    records += [Record("sample", args.combiner, seed, f"z{i:03d}", v) for i, v in enumerate(z)]
    return SweepResult("sample", [args.combiner], records, "distance", False), {}


RUNNERS = {
    "oracle-check": run_oracle_check, "denoise-bench": run_denoise,
    "gap-curve": run_gap, "lambda-sweep": run_lambda, "alpha-sweep": run_alpha,
    "engine-compare": run_engines, "sampler-compare": run_sampler,
}


def _figure_for(res: SweepResult, path: Path, reference=None):
    from . import figures
    if res.experiment == "denoise":
        return figures.denoise_figure(res, reference, path)
    if res.experiment == "gap":
        return figures.gap_figure(res, path)
    if res.experiment == "alpha_sweep":
        return figures.alpha_figure(res, path)
    if res.experiment == "sampler_compare":
        return figures.box_figure(res, path)
    if res.experiment in ("lambda_sweep", "engine_compare"):
        return figures.bar_figure(res, path, "median grid PSNR (dB)")
    return None


def _reference_curves():
    return {p: {T: v[0] for T, v in rows.items()}
            for p, rows in REFERENCE_DENOISE_TABLE.items()}


def run_experiment(sub: str, cfg: dict, args, out: Path) -> int:
    chash = config_hash(cfg)
    name = EXPERIMENT_FILES[sub]

    def compute():
        if sub == "distill":
            return run_distill(cfg, args, out)
        if sub == "sample":
            return run_sample(cfg, args, out)
        return RUNNERS[sub](cfg, args)

    res, extra = compute()
    csv_bytes = artifacts.records_to_csv(res.records, chash)
    repro = None
    if args.check_repro:
        again, _ = compute()
        repro = artifacts.records_to_csv(again.records, chash) == csv_bytes
    (out / f"{name}.csv").write_bytes(csv_bytes)
    summary = {
        "experiment": res.experiment,
        "subcommand": sub,
        "config_hash": chash,
        "config": cfg,
        "csv": f"{name}.csv",
        "csv_sha256": hashlib.sha256(csv_bytes).hexdigest(),
        "cells": res.cells,
        "metric": res.metric,
        "higher_is_better": res.higher_is_better,
        "summary": res.summary() if res.records else {},
        "reproducible": repro,
        **extra,
    }
    if not args.no_figures and cfg["bench"]["figures"]:
        ref = _reference_curves() if res.experiment == "denoise" else None
        fig = _figure_for(res, out / f"{name}.svg", ref)
        if fig:
            summary["figure"] = f"{name}.svg"
    artifacts.write_json(out / f"{name}.json", summary)
    print(f"{sub}: wrote {out / (name + '.csv')} (config {chash})")
    if sub == "oracle-check" and extra["failures"]:
        print(f"oracle-check: {extra['failures']} check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# report

def _load_outputs(out: Path):
    """Collect verified experiment outputs plus a list of problems."""
    results, problems, hashes = {}, [], set()
    for js in sorted(out.glob("*.json")):
        if js.name in ("report.json", "error.json"):
            continue
        try:
            meta = json.loads(js.read_text(encoding="utf-8"))
            csv_path = out / meta["csv"]
        except (ValueError, KeyError) as e:
            problems.append({"file": js.name, "problem": "corrupt", "detail": str(e)})
            continue
        if not csv_path.exists():
            problems.append({"file": meta["csv"], "problem": "missing"})
            continue
        try:
            chash, records = artifacts.read_records_csv(csv_path)
        except (artifacts.CorruptArtifact, UnicodeDecodeError) as e:
            problems.append({"file": csv_path.name, "problem": "corrupt", "detail": str(e)})
            continue
        flags = []
        if artifacts.sha256_file(csv_path) != meta.get("csv_sha256"):
            flags.append("digest differs from summary")
        if chash != meta.get("config_hash"):
            flags.append("embedded config hash differs from summary")
        if flags:
            problems.append({"file": csv_path.name, "problem": "config_mismatch",
                             "detail": "; ".join(flags)})
            continue
        hashes.add(meta["config_hash"])
        res = SweepResult(meta["experiment"], meta["cells"], records, meta["metric"],
                          meta["higher_is_better"])
        results[meta["experiment"]] = (res, meta)
    return results, problems, hashes


def evaluate(results: dict) -> list:
    """One CriterionResult per acceptance criterion from loaded outputs."""
    get = lambda k: results.get(k, (None, None))  # noqa: E731
    oc_res, oc_meta = get("oracle_check")
    checks = oc_meta["checks"] if oc_meta else None
    crit = []
    crit.append(acceptance.criterion_algebra(checks) if checks else acceptance.missing(1))
    crit.append(acceptance.criterion_scores(checks) if checks else acceptance.missing(2))
    table = [("gap", acceptance.criterion_gap, 3), ("denoise", acceptance.criterion_denoise, 4),
             ("lambda_sweep", acceptance.criterion_lambda, 5),
             ("alpha_sweep", acceptance.criterion_alpha, 6),
             ("engine_compare", acceptance.criterion_usd_sds, 7),
             ("engine_compare", acceptance.criterion_variance, 8),
             ("sampler_compare", acceptance.criterion_sampler, 9)]
    for key, fn, cid in table:
        res, _ = get(key)
        if res is None:
            crit.append(acceptance.missing(cid))
            continue
        try:
            crit.append(fn(res))
        except (KeyError, ValueError, IndexError) as e:
            crit.append(acceptance.missing(cid, f"incomplete output: {e}"))
    eng, _ = get("engine_compare")
    if checks and eng is not None:
        rv = [c for c in eng.cells if c.startswith("usd+rv")]
        try:
            crit.append(acceptance.criterion_reference_view(checks, eng, rv[0]))
        except (IndexError, ValueError) as e:
            crit.append(acceptance.missing(10, f"incomplete output: {e}"))
    else:
        crit.append(acceptance.missing(10))
    flags = [m.get("reproducible") for _, m in results.values()]
    checked = [f for f in flags if f is not None]
    if checked:
        crit.append(acceptance.criterion_reproducible(
            all(checked), f"{sum(checked)}/{len(checked)} experiments re-ran byte-identically"))
    else:
        crit.append(acceptance.missing(11, "no experiment was run with --check-repro"))
    return crit


def run_report(out: Path, args) -> int:
    if not out.is_dir():
        _error(out, "missing_artifact", f"output directory {out} does not exist", make_dir=False)
        return EXIT_MISSING
    results, problems, hashes = _load_outputs(out)
    if not results:
        _error(out, "missing_artifact", f"no experiment outputs in {out}",
               extra={"problems": problems})
        return EXIT_MISSING
    crit = evaluate(results)
    rows = []
    for c in crit:
        rows.append(Record("report", f"A{c.id}", 0, "pass",
                           float("nan") if c.passed is None else float(c.passed)))
    for pred, levels in REFERENCE_DENOISE_TABLE.items():
        for T, (p, s, lp) in levels.items():
            for metric, v in (("psnr", p), ("ssim", s), ("lpips", lp)):
                rows.append(Record("paper_reference", f"{pred}@T{T}", 0, metric, v))
    chash = sorted(hashes)[0] if len(hashes) == 1 else "mixed"
    csv_sha = artifacts.write_records_csv(out / "report.csv", rows, chash)
    report = {
        "config_hashes": sorted(hashes),
        "criteria": [{"id": c.id, "name": c.name, "status": c.status, "detail": c.detail}
                     for c in crit],
        "paper_reference": [{"kind": "paper_reference", "predictor": p, "T": T,
                             "psnr": v[0], "ssim": v[1], "lpips": v[2]}
                            for p, lv in REFERENCE_DENOISE_TABLE.items()
                            for T, v in lv.items()],
        "problems": problems,
        "experiments": sorted(results),
        "csv": "report.csv",
        "csv_sha256": csv_sha,
    }
    if len(hashes) > 1:
        report["problems"].append({"problem": "config_mismatch",
                                   "detail": f"outputs come from {len(hashes)} configs"})
    if not args.no_figures:
        figs = {}
        for name, (res, _) in sorted(results.items()):
            ref = _reference_curves() if name == "denoise" else None
            f = _figure_for(res, out / f"report_{name}.svg", ref)
            if f:
                figs[name] = Path(f).name
        report["figures"] = figs
    artifacts.write_json(out / "report.json", report)
    for c in crit:
        print(c.line())
    for p in problems:
        print(f"problem: {p}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# plumbing

def _error(out: Path, kind: str, message: str, key=None, line=None, extra=None,
           make_dir=True):
    record = {"error": kind, "message": message}
    if key is not None:
        record["key"] = key
    if line is not None:
        record["line"] = line
    record.update(extra or {})
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    if make_dir:
        try:
            out.mkdir(parents=True, exist_ok=True)
            artifacts.write_json(out / "error.json", record)
        except OSError:
            pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoredistill",
                                description="Desk-scale score-distillation experiments.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--no-figures", action="store_true", help="skip SVG figures")
    p.add_argument("--check-repro", action="store_true",
                   help="run the experiment twice and record byte equality")
    g = p.add_argument_group("sample")
    g.add_argument("--combiner", choices=("collapsed", "rectified", "general"),
                   default="rectified")
    g.add_argument("--omega", type=float)
    g.add_argument("--from-noise-level", type=int)
    g.add_argument("--eta", type=float)
    g.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    if args.subcommand == "report":
        if out is None:
            try:
                out = Path(load_config(args.config, args.overrides)["output_dir"])
            except ConfigError as e:
                _error(Path("."), "config_error", str(e), e.key, e.line, make_dir=False)
                return EXIT_CONFIG
        return run_report(out, args)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as e:
        _error(out or Path("."), "config_error", str(e), e.key, e.line,
               make_dir=out is not None)
        return EXIT_CONFIG
    if out is None:
        out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        return run_experiment(args.subcommand, cfg, args, out)
    except ConfigError as e:
        _error(out, "config_error", str(e), e.key, e.line)
        return EXIT_CONFIG
    except NumericalAbort as e:
        _error(out, "numerical_abort", str(e))
        return EXIT_NUMERIC
    except ValueError as e:
        _error(out, "config_error", str(e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

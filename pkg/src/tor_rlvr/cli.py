"""Command-line front end: ``train``, ``analyze``, ``gradcheck``, ``compare``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric abort,
4 checkpoint error, 5 gradient check failure. ``TOR_OUTPUT_DIR`` overrides
the output root (default ``runs``).
"""
from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from . import analysis as an
from . import config as cf
from . import gradcheck as gc
from . import policy as pl
from .errors import CheckpointError, ConfigurationError, NumericError, TorError, UsageError
from .scoring import PROXIES, build_score_table
from .selection import select_tokens
from .trainer import ALGORITHMS, TrainingAborted, derive_seed, train_loop

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 2, 3, 4, 5
_ANALYZE_STREAM = 101


def output_root(cli_value=None):
    return cli_value or os.environ.get("TOR_OUTPUT_DIR") or "runs"


def default_run_id(config):
    digest = hashlib.sha256(json.dumps(cf.to_dict(config), sort_keys=True).encode()).hexdigest()
    return f"{config.algorithm}-s{config.rng_seed}-{digest[:8]}"


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def inventory(run_dir, exclude=("manifest.json",)):
    files = []
    for root, _, names in os.walk(run_dir):
        for name in sorted(names):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, run_dir)
            if rel not in exclude:
                files.append({"path": rel, "sha256": file_digest(path)})
    return sorted(files, key=lambda f: f["path"])


def write_manifest(run_dir, manifest):
    path = os.path.join(run_dir, "manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


# ---------------------------------------------------------------------------
# analysis of one checkpoint


def analyze_params(params, config, out_dir, run_id, batch_index=0):
    """Sample a fresh batch under ``params`` and write every analysis report.

    Returns ``{report kind: path}``.
    """
    from .trainer import _task_samples

    samples = _task_samples(config, batch_index, 0)
    batch = pl.sample_rollouts(params, samples, config.group_size, config.top_p,
                               config.max_len,
                               derive_seed(config.rng_seed, _ANALYZE_STREAM, batch_index),
                               entropy_p=config.selection.entropy_top_p,
                               renormalize_entropy=config.selection.renormalize_entropy)
    from .objectives import compute_rewards

    rewards = compute_rewards(batch)
    table = build_score_table(batch, params, p=config.selection.entropy_top_p, proxies=PROXIES)
    tr = select_tokens(table, "entropy", config.selection.alpha_r)
    tp = select_tokens(table, "sensitivity", config.selection.alpha_p)
    paths = {}

    def path(kind):
        return an.report_path(out_dir, kind, run_id, batch_index)

    for field in ("entropy", "sensitivity"):
        kind = f"distribution-{field}"
        paths[kind] = an.write_distribution(an.distribution_report(table, field), path(kind))
    paths["scatter"] = an.write_scatter(an.interdependence_scatter(batch, table, tr, tp),
                                        path("scatter"))
    paths["overlap"] = an.write_overlap(an.overlap_trace([(tr, tp)], [len(table)]),
                                        path("overlap"))
    paths["mixture"] = an.write_mixture(an.mixture_report(batch, tr, tp, rewards),
                                        path("mixture"))
    paths["proxyMatrix"] = an.write_proxy_matrix(an.proxy_comparison(table), path("proxyMatrix"))
    return paths


def check_compatible(params, config):
    if params.config != config.policy or params.task != config.task:
        raise CheckpointError("checkpoint was written for a different policy or task config")


# ---------------------------------------------------------------------------
# commands


def command_train(args):
    config = cf.load_config(args.config, args.set)
    run_id = args.run_id or default_run_id(config)
    run_dir = os.path.join(output_root(args.out), run_id)
    os.makedirs(os.path.join(run_dir, "analysis"), exist_ok=True)
    manifest = {"runId": run_id, "engineVersion": __version__, "config": cf.to_dict(config),
                "startedAt": _now(), "finishedAt": None, "status": "running", "files": []}
    write_manifest(run_dir, manifest)
    status = "ok"
    try:
        result = train_loop(config, run_dir,
                            progress=None if args.quiet else _progress(config))
        history = [(r["overlapRatio"], r["overlapRatioOfTotal"]) for r in result.history]
        rows = [{"batch": k, "overlapRatio": a, "overlapRatioOfTotal": b}
                for k, (a, b) in enumerate(history)]
        an.write_overlap(rows, an.report_path(os.path.join(run_dir, "analysis"), "overlap",
                                              run_id, config.total_rollout_batches))
        print(f"run {run_id}: greedy reward {result.initial_eval:.3f} -> {result.final_eval:.3f}")
        print(f"outputs in {run_dir}")
        return EXIT_OK
    except TrainingAborted as exc:
        status = "aborted"
        print(f"error: {exc}; diagnostic dump: {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        manifest.update(finishedAt=_now(), status=status, files=inventory(run_dir))
        write_manifest(run_dir, manifest)


def _progress(config):
    every = max(1, config.total_rollout_batches // 10)

    def report(row):
        if (row["batch"] + 1) % every == 0:
            print(f"batch {row['batch'] + 1}/{config.total_rollout_batches}"
                  f"  reward {row['meanReward']:.3f}  overlap {row['overlapRatio']:.3f}",
                  flush=True)

    return report


def command_analyze(args):
    config = cf.load_config(args.config, args.set)
    if not os.path.exists(args.checkpoint):
        raise CheckpointError(f"no checkpoint at {args.checkpoint}")
    params = pl.load_checkpoint(args.checkpoint)
    check_compatible(params, config)
    run_id = args.run_id or os.path.splitext(os.path.basename(args.checkpoint))[0]
    out_dir = args.out or os.path.join(os.path.dirname(os.path.dirname(
        os.path.abspath(args.checkpoint))), "analysis")
    paths = analyze_params(params, config, out_dir, run_id, args.batch_index)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def command_gradcheck(args):
    config = cf.load_config(args.config, args.set) if args.config or args.set else None
    task = None if config is None else replace(config.task)
    reports = gc.run_gradcheck(seed=args.seed, corrupt=args.corrupt_adjoint, task=task)
    worst = None
    for name, rep in reports.items():
        mark = "ok" if rep.passed else "FAIL"
        print(f"{name:9s} max relative error {rep.max_error:.3e}  {mark}")
        if not rep.passed and (worst is None or rep.max_error > worst[1].max_error):
            worst = (name, rep)
    if worst is None:
        return EXIT_OK
    name, rep = worst
    param, index = rep.worst
    print(f"gradient check failed: worst coordinate {param}{tuple(int(i) for i in index)} "
          f"in {name} (relative error {rep.max_error:.3e})", file=sys.stderr)
    return EXIT_GRADCHECK


def _parse_list(text, kind=str):
    return [kind(v.strip()) for v in text.split(",") if v.strip()]


def command_compare(args):
    base = cf.load_file(args.config) if args.config else {}
    base = cf.apply_overrides(base, args.set)
    algorithms = _parse_list(args.algorithms)
    seeds = _parse_list(args.seeds, int)
    if not algorithms or not seeds:
        raise UsageError("compare needs at least one algorithm and one seed")
    bad = set(algorithms) - set(ALGORITHMS)
    if bad:
        raise ConfigurationError(f"unknown algorithms {sorted(bad)}")
    sweep_key, sweep_values = None, [None]
    if args.sweep:
        sweep_key, _, values = args.sweep.partition("=")
        sweep_values = [cf.parse_value(v) for v in values.split(",") if v.strip()]
        if not sweep_values:
            raise UsageError("--sweep needs key=v1,v2,...")
    root = output_root(args.out)
    name = args.name or "compare"
    out_dir = os.path.join(root, name)
    os.makedirs(out_dir, exist_ok=True)
    cells = []
    for value in sweep_values:
        for algorithm in algorithms:
            overrides = [f"algorithm={json.dumps(algorithm)}"]
            if sweep_key is not None:
                overrides.append(f"{sweep_key}={json.dumps(value)}")
            for seed in seeds:
                config = cf.from_dict(cf.apply_overrides(base, overrides + [f"rngSeed={seed}"]))
                run_id = default_run_id(config)
                cell = {"algorithm": algorithm, "sweepKey": sweep_key or "",
                        "sweepValue": "" if value is None else value, "seed": seed,
                        "runId": run_id, "initialReward": "", "finalReward": "",
                        "status": "ok"}
                try:
                    res = train_loop(config, os.path.join(root, run_id) if args.keep_runs
                                     else None)
                    cell.update(initialReward=res.initial_eval, finalReward=res.final_eval)
                except TorError as exc:
                    cell["status"] = f"failed: {exc}"
                    log.error("run %s failed: %s", run_id, exc)
                cells.append(cell)
                print(f"{algorithm} seed {seed}"
                      + (f" {sweep_key}={value}" if sweep_key else "")
                      + f": {cell['finalReward'] if cell['status'] == 'ok' else cell['status']}",
                      flush=True)
                _write_compare(out_dir, cells)
    _write_compare(out_dir, cells)
    print(f"summary: {os.path.join(out_dir, 'summary.csv')}")
    return EXIT_OK


def summarize(cells):
    """Per (algorithm, sweep value): mean and population std of final rewards."""
    groups = {}
    for c in cells:
        groups.setdefault((c["algorithm"], c["sweepKey"], str(c["sweepValue"])), []).append(c)
    rows = []
    for (algorithm, key, value), members in groups.items():
        ok = [float(c["finalReward"]) for c in members if c["status"] == "ok"]
        rows.append({"algorithm": algorithm, "sweepKey": key, "sweepValue": value,
                     "nSeeds": len(members), "nFailed": len(members) - len(ok),
                     "meanFinalReward": float(np.mean(ok)) if ok else "",
                     "stdFinalReward": float(np.std(ok)) if ok else ""})
    return rows


def _write_compare(out_dir, cells):
    header = ("algorithm", "sweepKey", "sweepValue", "seed", "runId", "initialReward",
              "finalReward", "status")
    with open(os.path.join(out_dir, "runs.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, header, lineterminator="\n")
        w.writeheader()
        w.writerows(cells)
    rows = summarize(cells)
    header = ("algorithm", "sweepKey", "sweepValue", "nSeeds", "nFailed",
              "meanFinalReward", "stdFinalReward")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, header, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="tor-rlvr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="TOML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, repeatable (e.g. selection.gammaP=0.5)")

    p = sub.add_parser("train", help="run one training job")
    common(p)
    p.add_argument("--out", help="output root (default $TOR_OUTPUT_DIR or ./runs)")
    p.add_argument("--run-id")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=command_train)

    p = sub.add_parser("analyze", help="write analysis reports for a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="report directory (default: the run's analysis/)")
    p.add_argument("--run-id")
    p.add_argument("--batch-index", type=int, default=0)
    p.set_defaults(func=command_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of all objectives")
    common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-adjoint", action="store_true",
                   help="scale matmul adjoints (negative control; must fail)")
    p.set_defaults(func=command_gradcheck)

    p = sub.add_parser("compare", help="several algorithms over several seeds")
    common(p)
    p.add_argument("--algorithms", default="grpo,tor-grpo")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--sweep", help="KEY=v1,v2,... applied to every algorithm")
    p.add_argument("--out")
    p.add_argument("--name", help="subdirectory for runs.csv and summary.csv")
    p.add_argument("--keep-runs", action="store_true", help="also keep per-run outputs")
    p.set_defaults(func=command_compare)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

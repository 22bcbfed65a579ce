"""Command-line entry point: ``diffcard <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 incompatible bundle.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings

import numpy as np

from . import __version__
from .bundle import IncompatibleBundle, load, read_header, save
from .config import ConfigError, Settings
from .config import load as load_config
from .workload import (DataError, Summary, format_summary, gen_forest_like, gen_modulo, gen_near_functional,
                       gen_workload, ingest_csv, label_workload, q_error, read_workload, report, workload_dim,
                       write_workload, SUMMARY_HEADER)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BUNDLE = 0, 2, 3, 4
RESULT_HEADER = ["query_id", "estimate", "true_count", "q_error", "path", "latency_ms"]

log = logging.getLogger("diffcard")


def _read_table(path) -> np.ndarray:
    table, _ = ingest_csv(path)
    return table


def _write_table(path, table, names=None):
    names = names or [f"a{j}" for j in range(table.shape[1])]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(names)
        for row in table:
            w.writerow([repr(float(v)) if v != int(v) else int(v) for v in row])


def cmd_gen_data(a):
    if a.kind == "modulo":
        table = gen_modulo(a.rows, a.modulus, a.noise_modulus, a.seed)
        names = list("ABCDE")
    elif a.kind == "forest_like":
        from .workload import FOREST_LIKE_NAMES
        table, names = gen_forest_like(a.rows, a.seed), list(FOREST_LIKE_NAMES)
    else:
        table, names = gen_near_functional(a.rows, seed=a.seed), None
    _write_table(a.out, table, names)
    print(f"wrote {table.shape[0]} rows x {table.shape[1]} columns to {a.out}")
    return EXIT_OK


def cmd_gen_workload(a):
    table = _read_table(a.data)
    fr = (1, 0, 0) if a.split == "train" else (0, 1, 0) if a.split == "validate" else \
        (0, 0, 1) if a.split == "test" else (0.8, 0.1, 0.1)
    wl = gen_workload(table, a.count, a.seed, fractions=fr)
    if not a.no_label:
        label_workload(table, wl)
    write_workload(a.out, wl)
    print(f"wrote {len(wl)} queries to {a.out}")
    return EXIT_OK


def cmd_train(a):
    from .pipeline import StageError, build_bundle, load_table

    s = load_config(a.config) if a.config else Settings()
    if a.out:
        s.output.bundle = a.out
    try:
        table = load_table(s)
    except (OSError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    timings = {}
    try:
        bundle = build_bundle(table, s, timings=timings)
    except StageError as e:
        print(f"error: training {e}", file=sys.stderr)
        return EXIT_DATA
    sizes = save(bundle, s.output.bundle)
    print(f"trained on {len(table)} rows x {table.shape[1]} attributes; epsilon = {bundle.sched.epsilon:g}")
    if bundle.cond is not None:
        print(f"attribute {bundle.cond.child} is modelled conditionally on attribute {bundle.cond.parent}")
    for k, v in timings.items():
        print(f"  stage {k:<18s} {v:8.2f} s")
    print(f"wrote {s.output.bundle}")
    for k, v in sizes.items():
        print(f"  {k:<10s} {v:>9d} bytes")
    return EXIT_OK


def cmd_estimate(a):
    from .selectivity import estimate_workload

    bundle = load(a.bundle)
    d_wl = workload_dim(a.workload)
    if d_wl > bundle.d:
        print(f"error: workload references attribute {d_wl - 1} but the bundle has {bundle.d}", file=sys.stderr)
        return EXIT_BUNDLE
    wl = read_workload(a.workload, bundle.d)
    if a.split:
        wl = wl.of_split(a.split)
    mode = a.mode
    if mode == "adc+" and bundle.tree is None:
        warnings.warn("bundle has no decision tree; falling back to adc mode", stacklevel=1)
        print("warning: bundle has no decision tree; using adc mode", file=sys.stderr)
        mode = "adc"
    if a.seed is not None:
        bundle.seed = a.seed
    est = estimate_workload(bundle, wl, mode, a.n, a.threads)
    order = np.argsort(wl.ids, kind="stable")
    with open(a.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        for q in order:
            e = est[q]
            true = wl.cards[q]
            qe = "" if np.isnan(true) else repr(q_error(true, e.cardinality))
            w.writerow([int(wl.ids[q]), repr(e.cardinality), "" if np.isnan(true) else int(true), qe, e.path,
                        f"{e.wall_ms:.4f}"])
    print(f"wrote {len(est)} estimates ({mode}) to {a.out}")
    return EXIT_OK


def read_results(path):
    rows = []
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        if r.fieldnames is None or r.fieldnames[:len(RESULT_HEADER)] != RESULT_HEADER:
            raise DataError(f"{path}: not a results file")
        for rec in r:
            rows.append(rec)
    return rows


def summarize_results(path, model_bytes: int = 0) -> Summary:
    rows = [r for r in read_results(path) if r["q_error"] != ""]
    if not rows:
        raise DataError(f"{path}: no rows with a true count")
    return report([float(r["q_error"]) for r in rows], [float(r["latency_ms"]) for r in rows], model_bytes)


def cmd_report(a):
    model_bytes = read_header(a.bundle)["sizes"]["total"] if a.bundle else 0
    summaries = {}
    for path in a.results:
        summaries[path] = summarize_results(path, model_bytes)
    print(format_summary(summaries))
    if a.csv:
        with open(a.csv, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["results"] + SUMMARY_HEADER)
            for k, s in summaries.items():
                w.writerow([k] + s.row())
    return EXIT_OK


def cmd_inspect(a):
    h = read_header(a.bundle)
    show = {k: h[k] for k in ("version", "created", "schedule", "rows", "seed", "n_samples", "density", "cond")}
    show["model"] = h["model"]
    show["dataset_hash"] = h["provenance"].get("dataset_hash")
    show["has_tree"] = any(b["name"] == "tree" for b in h["blocks"])
    show["sizes"] = h["sizes"]
    print(json.dumps(show, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffcard", description="Diffusion-corrected cardinality estimation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic table as CSV")
    g.add_argument("kind", choices=["modulo", "forest_like", "near_functional"])
    g.add_argument("--rows", type=int, default=20000)
    g.add_argument("--modulus", type=int, default=2000)
    g.add_argument("--noise-modulus", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    g = sub.add_parser("gen-workload", help="generate labelled range queries over a CSV table")
    g.add_argument("data")
    g.add_argument("--count", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=["train", "validate", "test", "mixed"], default="mixed")
    g.add_argument("--no-label", action="store_true", help="skip the full-scan cardinalities")
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_gen_workload)

    g = sub.add_parser("train", help="train an estimator bundle from an INI config")
    g.add_argument("config", nargs="?")
    g.add_argument("-o", "--out")
    g.set_defaults(func=cmd_train)

    g = sub.add_parser("estimate", help="estimate every query of a workload file")
    g.add_argument("bundle")
    g.add_argument("workload")
    g.add_argument("--mode", choices=["adc", "adc+", "gmm"], default="adc+")
    g.add_argument("--n", type=int, default=None, help="samples per corrected query")
    g.add_argument("--seed", type=int, default=None, help="overrides the bundle seed")
    g.add_argument("--split", choices=["train", "validate", "test"], default=None)
    g.add_argument("--threads", type=int, default=1)
    g.add_argument("-o", "--out", required=True)
    g.set_defaults(func=cmd_estimate)

    g = sub.add_parser("report", help="summarize Q-errors of one or more results files")
    g.add_argument("results", nargs="+")
    g.add_argument("--bundle", help="bundle whose size to report")
    g.add_argument("--csv", help="also write the summary as CSV")
    g.set_defaults(func=cmd_report)

    g = sub.add_parser("inspect", help="print bundle metadata and size breakdown")
    g.add_argument("bundle")
    g.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IncompatibleBundle as e:
        print(f"incompatible bundle: {e}", file=sys.stderr)
        return EXIT_BUNDLE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

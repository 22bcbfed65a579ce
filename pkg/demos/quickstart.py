"""Train a small bundle on a synthetic terrain table and compare the three estimation modes.

Runs in about a minute on one core:  python demos/quickstart.py
"""

import numpy as np

from diffcard.config import Settings
from diffcard.pipeline import build_bundle
from diffcard.selectivity import estimate_workload
from diffcard.workload import format_summary, gen_forest_like, gen_workload, label_workload, q_error, report


def main():
    table = gen_forest_like(5000, seed=0)
    s = Settings()
    # shortened training; the defaults take a few minutes
    s.score.epochs, s.score.steps_per_epoch = 6, 100
    s.tree.queries = 1500
    timings = {}
    bundle = build_bundle(table, s, timings=timings)
    print("training stages (s):", {k: round(v, 1) for k, v in timings.items()})

    wl = label_workload(table, gen_workload(table, 300, seed=1, fractions=(0, 0, 1)))
    rows = {}
    for mode in ("gmm", "adc", "adc+"):
        est = estimate_workload(bundle, wl, mode)
        rows[mode] = report(q_error(wl.cards, [e.cardinality for e in est]), [e.wall_ms for e in est])
        if mode == "adc+":
            paths, counts = np.unique([e.path for e in est], return_counts=True)
            print("adc+ paths:", dict(zip(paths, counts.tolist())))
    print(format_summary(rows))


if __name__ == "__main__":
    main()

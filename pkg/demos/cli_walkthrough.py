"""The command-line workflow end to end, on a small modulo table, inside a temporary directory."""

import subprocess
import sys
import tempfile
from pathlib import Path

CONFIG = """
[data]
source = csv
path = data.csv
[score]
epochs = 4
steps_per_epoch = 100
[tree]
queries = 1000
[output]
bundle = model.bundle
"""


def run(*args, cwd):
    print("$ diffcard", " ".join(args))
    subprocess.run([sys.executable, "-m", "diffcard.cli", *args], cwd=cwd, check=True)


def main():
    with tempfile.TemporaryDirectory() as d:
        Path(d, "train.ini").write_text(CONFIG)
        run("gen-data", "modulo", "--rows", "20000", "--modulus", "200", "--noise-modulus", "20", "-o", "data.csv",
            cwd=d)
        run("gen-workload", "data.csv", "--count", "200", "--split", "test", "-o", "queries.tsv", cwd=d)
        run("train", "train.ini", cwd=d)
        run("inspect", "model.bundle", cwd=d)
        for mode in ("gmm", "adc+"):
            run("estimate", "model.bundle", "queries.tsv", "--mode", mode, "-o", f"{mode}.csv", cwd=d)
        run("report", "gmm.csv", "adc+.csv", "--bundle", "model.bundle", cwd=d)


if __name__ == "__main__":
    main()

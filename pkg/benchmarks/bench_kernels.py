"""Compare the compiled and pure-Python tape kernels on the credit objective.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time
from importlib.resources import files
from pathlib import Path

import numpy as np

from seqrecourse import autodiff as ad
from seqrecourse.actions import load_catalog
from seqrecourse.cli import load_instances
from seqrecourse.cwopt import build_objective
from seqrecourse.nnmodel import load_model

DATA = Path(str(files("seqrecourse") / "data"))


def time_backend(backend, model, catalog, x0, sigma, repeats):
    obj = build_objective(model, catalog, sigma, x0, tape=ad.Tape(backend))
    theta = np.zeros(obj.n_params)
    obj.evaluate(1.0, theta)
    obj.gradient()
    t0 = time.perf_counter()
    for _ in range(repeats):
        obj.evaluate(1.0, theta)
        g = obj.gradient()
    secs = (time.perf_counter() - t0) / repeats
    return secs, len(obj.tape), obj.tape.forward_slots([1.0, *theta]), g


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args()
    model = load_model(DATA / "credit_model.json")
    catalog = load_catalog(DATA / "german_catalog.json", model.schema)
    x0 = load_instances(DATA / "credit_instances.csv", model.schema)[0].raw
    sigma = [catalog.index("Change Credit Amount"), catalog.index("Adjust Loan Period"),
             catalog.index("Wait Years")]
    results = {}
    for be in ad.available_backends():
        secs, n, vals, g = time_backend(be, model, catalog, x0, sigma, args.repeats)
        results[be] = (np.asarray(vals, float).tobytes(), g.tobytes())
        print(f"{be:>9}: {n} nodes, forward+backward {secs * 1e6:9.1f} us")
    if len(results) == 2:
        same = results["python"] == results["compiled"]
        print(f"bitwise identical values and gradients: {same}")
    else:
        print("compiled kernel not available; only the python backend was timed")


if __name__ == "__main__":
    main()

"""Regenerate the bundled synthetic credit fixture.

Draws a German-style applicant table (5 numeric features, 5 categorical
groups, 20 model inputs in all), trains a 2x40 ReLU network on it with plain
numpy, and writes the model, 20 negatively classified instances and the
action catalogs into ``src/seqrecourse/data``. The committed files are the
output of one run with the default seed; rerunning reproduces them.

    python3 scripts/make_credit_fixture.py [--seed 7] [--out DIR]
"""

from __future__ import annotations

import argparse
import csv
import json
from pathlib import Path

import numpy as np

NUMERIC = [
    # name, domain, sampler
    ("duration", (4.0, 120.0)),
    ("credit_amount", (250.0, 100000.0)),
    ("age", (18.0, 120.0)),
    ("existing_credits", (1.0, 4.0)),
    ("num_dependents", (1.0, 2.0)),
]
GROUPS = [
    ("checking", ["lt0", "0to200", "ge200", "none"]),
    ("savings", ["lt100", "100to1000", "ge1000"]),
    ("employment", ["unemployed", "unskilled", "skilled", "highly_skilled"]),
    ("guarantor", ["none", "yes"]),
    ("citizen", ["yes", "no"]),
]


def sample_applicants(rng: np.random.Generator, n: int) -> dict:
    cols = {
        "duration": np.clip(np.round(rng.gamma(3.0, 7.0, n)), 4, 72),
        "age": np.clip(np.round(rng.normal(36, 11, n)), 19, 75),
        "existing_credits": rng.integers(1, 5, n).astype(float),
        "num_dependents": rng.integers(1, 3, n).astype(float),
    }
    cols["credit_amount"] = np.clip(np.round(cols["duration"] * rng.lognormal(4.8, 0.5, n), -1), 250, 20000)
    probs = {
        "checking": [0.27, 0.27, 0.07, 0.39],
        "savings": [0.6, 0.3, 0.1],
        "employment": [0.08, 0.22, 0.55, 0.15],
        "guarantor": [0.92, 0.08],
        "citizen": [0.96, 0.04],
    }
    for g, cats in GROUPS:
        cols[g] = rng.choice(len(cats), n, p=probs[g])
    return cols


def risk_score(cols: dict, rng: np.random.Generator) -> np.ndarray:
    s = (
        -0.035 * (cols["duration"] - 20)
        - 0.00022 * (cols["credit_amount"] - 3000)
        + 0.045 * (np.minimum(cols["age"], 65) - 35)
        - 0.25 * (cols["existing_credits"] - 1)
        - 0.1 * (cols["num_dependents"] - 1)
    )
    s += np.array([-0.9, -0.3, 0.5, 1.0])[cols["checking"]]
    s += np.array([-0.2, 0.2, 0.7])[cols["savings"]]
    s += np.array([-1.4, 0.0, 0.3, 0.5])[cols["employment"]]
    s += np.array([0.0, 1.2])[cols["guarantor"]]
    s += np.array([0.0, -0.4])[cols["citizen"]]
    return s + rng.normal(0.0, 0.5, s.shape) + 0.4


def encode(cols: dict) -> np.ndarray:
    n = len(cols["age"])
    parts = [cols[name][:, None] for name, _ in NUMERIC]
    for g, cats in GROUPS:
        oh = np.zeros((n, len(cats)))
        oh[np.arange(n), cols[g]] = 1.0
        parts.append(oh)
    return np.hstack(parts)


def train_mlp(xn: np.ndarray, y: np.ndarray, rng: np.random.Generator, hidden: int = 40,
              epochs: int = 1500, lr: float = 0.005, wd: float = 1e-4) -> list[tuple[np.ndarray, np.ndarray]]:
    dims = [xn.shape[1], hidden, hidden, 2]
    params = []
    for i, o in zip(dims[:-1], dims[1:]):
        params.append([rng.normal(0, np.sqrt(2.0 / i), (o, i)), np.zeros(o)])
    m = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]
    v = [[np.zeros_like(w), np.zeros_like(b)] for w, b in params]
    onehot = np.eye(2)[y]
    for step in range(1, epochs + 1):
        acts = [xn]
        h = xn
        for li, (w, b) in enumerate(params):
            h = h @ w.T + b
            if li < len(params) - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        z = acts[-1] - acts[-1].max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        delta = (p - onehot) / len(y)
        for li in range(len(params) - 1, -1, -1):
            w, b = params[li]
            gw = delta.T @ acts[li] + wd * w
            gb = delta.sum(axis=0)
            if li > 0:
                delta = (delta @ w) * (acts[li] > 0)
            for k, g in enumerate((gw, gb)):
                m[li][k] = 0.9 * m[li][k] + 0.1 * g
                v[li][k] = 0.999 * v[li][k] + 0.001 * g * g
                mh = m[li][k] / (1 - 0.9 ** step)
                vh = v[li][k] / (1 - 0.999 ** step)
                params[li][k] = params[li][k] - lr * mh / (np.sqrt(vh) + 1e-8)
    return [(w, b) for w, b in params]


def forward(params, xn):
    h = xn
    for li, (w, b) in enumerate(params):
        h = h @ w.T + b
        if li < len(params) - 1:
            h = np.maximum(h, 0.0)
    return h


def model_json(params, mean, std) -> dict:
    feats = []
    for k, (name, dom) in enumerate(NUMERIC):
        feats.append({"name": name, "kind": "numeric", "domain": list(dom),
                      "norm": {"mean": round(float(mean[k]), 6), "std": round(float(std[k]), 6)}})
    for g, cats in GROUPS:
        for c in cats:
            feats.append({"name": f"{g}={c}", "kind": "onehot", "group": g, "category": c})
    layers = []
    for li, (w, b) in enumerate(params):
        layers.append({"shape": list(w.shape), "weights": w.round(8).tolist(), "bias": b.round(8).tolist(),
                       "activation": "relu" if li < len(params) - 1 else "linear"})
    return {"schema": {"scheme": "zscore", "features": feats}, "layers": layers}


AMOUNT_ATOMS = {"tau": 0.01, "tau_prime": 0.01}  # 1000 / s with s = 100000

GERMAN_ACTIONS = {
    "Change Credit Amount": {
        "name": "Change Credit Amount", "kind": "continuous",
        "params": [{"name": "amount", "scale": 1000.0}],
        "transforms": [{"feature": "credit_amount", "expr": "x[credit_amount] + p[0]"}],
        "cost_expr": "abs(p[0]) / 1000",
        "precondition_expr": "x[age] > 15 && x[credit_amount] + p[0] > 0 && x[credit_amount] + p[0] < 100000",
    },
    "Change Loan Period": {
        "name": "Change Loan Period", "kind": "continuous",
        "params": [{"name": "months", "scale": 6.0}],
        "transforms": [{"feature": "duration", "expr": "x[duration] + p[0]"}],
        "cost_expr": "abs(p[0]) / 6",
        "precondition_expr": "x[duration] + p[0] > 0 && x[duration] + p[0] < 120",
    },
    "Adjust Loan Period": {
        "name": "Adjust Loan Period", "kind": "continuous",
        "params": [{"name": "months", "scale": 6.0}],
        "transforms": [
            {"feature": "duration", "expr": "x[duration] + p[0]"},
            {"feature": "credit_amount", "expr": "x[credit_amount] * (x[duration] + p[0]) / x[duration]"},
        ],
        "cost_expr": "abs(p[0]) / 6",
        "precondition_expr": ("x[credit_amount] > 1000"
                              " && x[credit_amount] * (x[duration] + p[0]) / x[duration] > 0"
                              " && x[credit_amount] * (x[duration] + p[0]) / x[duration] < 100000"
                              " && x[duration] + p[0] > 0 && x[duration] + p[0] < 120"),
        "relaxation": {"1": AMOUNT_ATOMS, "2": AMOUNT_ATOMS},
    },
    "Wait Years": {
        "name": "Wait Years", "kind": "continuous",
        "params": [{"name": "years", "scale": 1.0}],
        "transforms": [{"feature": "age", "expr": "x[age] + p[0]"}],
        "cost_expr": "2 * abs(p[0])",
        "precondition_expr": "x0[age] < x[age] + p[0] && x[age] + p[0] < 120",
    },
    "Naturalize": {
        "name": "Naturalize", "kind": "categorical",
        "transforms": [{"group": "citizen", "set_to": "yes"}],
        "cost_expr": "8", "precondition_expr": "x[citizen=no] > 0.5",
    },
    "Get Unskilled Job": {
        "name": "Get Unskilled Job", "kind": "categorical",
        "transforms": [{"group": "employment", "set_to": "unskilled"}],
        "cost_expr": "3", "precondition_expr": "x[employment=unemployed] > 0.5",
    },
    "Get Guarantor": {
        "name": "Get Guarantor", "kind": "categorical",
        "transforms": [{"group": "guarantor", "set_to": "yes"}],
        "cost_expr": "4", "precondition_expr": "x[guarantor=none] > 0.5",
    },
}
FIVE = ["Change Credit Amount", "Adjust Loan Period", "Wait Years", "Get Unskilled Job", "Get Guarantor"]


def write_instances(path: Path, cols: dict, idx, labels) -> None:
    header = ["id", "label"] + [n for n, _ in NUMERIC] + [g for g, _ in GROUPS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k, i in enumerate(idx):
            row = [f"c{k:02d}", int(labels[i])]
            row += [repr(float(cols[n][i])) for n, _ in NUMERIC]
            row += [cats[cols[g][i]] for g, cats in GROUPS]
            w.writerow(row)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "src/seqrecourse/data")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)

    cols = sample_applicants(rng, args.n)
    y = (risk_score(cols, rng) > 0).astype(int)
    X = encode(cols)
    k = len(NUMERIC)
    mean, std = X[:, :k].mean(axis=0), X[:, :k].std(axis=0)
    mean, std = np.round(mean, 6), np.round(std, 6)
    xn = X.copy()
    xn[:, :k] = (X[:, :k] - mean) / std

    n_train = int(0.8 * args.n)
    params = train_mlp(xn[:n_train], y[:n_train], rng)
    mj = model_json(params, mean, std)
    # evaluate with the rounded weights exactly as committed
    params = [(np.array(L["weights"]), np.array(L["bias"])) for L in mj["layers"]]
    g = forward(params, xn)
    pred = (g[:, 1] > g[:, 0]).astype(int)
    print(f"positive rate {y.mean():.3f}; train acc {np.mean(pred[:n_train] == y[:n_train]):.3f}; "
          f"test acc {np.mean(pred[n_train:] == y[n_train:]):.3f}")

    neg = [i for i in range(n_train, args.n) if pred[i] == 0][:20]
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "credit_model.json", "w") as fh:
        json.dump(mj, fh)
    write_instances(args.out / "credit_instances.csv", cols, neg, y)
    with open(args.out / "german_catalog.json", "w") as fh:
        json.dump({"actions": [GERMAN_ACTIONS[n] for n in FIVE]}, fh, indent=1)
    with open(args.out / "german_full_catalog.json", "w") as fh:
        json.dump({"actions": list(GERMAN_ACTIONS.values())}, fh, indent=1)
    print(f"wrote {len(neg)} negative instances to {args.out}")


if __name__ == "__main__":
    main()

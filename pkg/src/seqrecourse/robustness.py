"""Noise tolerance of synthesized sequences.

Each parameter ``r`` of a solution is redrawn uniformly from
``[(1 - theta) r, (1 + theta) r]``; a perturbed sequence still counts as a
solution when it passes the same exact feasibility check used by the
search. A solution tolerates ``theta`` if it succeeds with probability at
least 0.8.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .actions import ActionSequence, Catalog, check_feasible, trajectory
from .nnmodel import Model

log = logging.getLogger(__name__)

MARGIN_EPS = 1e-12


@dataclass(frozen=True)
class RobustnessConfig:
    thetas: tuple[float, ...] = (0.0, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2)
    samples: int = 100
    threshold: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if any(t < 0 for t in self.thetas):
            raise ValueError("theta must be non-negative")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass(frozen=True)
class Solution:
    instance_id: str
    x0: np.ndarray
    seq: ActionSequence


def perturb(seq: ActionSequence, theta: float, rng: np.random.Generator) -> ActionSequence:
    """Redraw every parameter from the interval spanned by (1 -/+ theta) r."""
    if theta < 0:
        raise ValueError("theta must be non-negative")
    if theta == 0:
        return seq
    rho = []
    for r_i in seq.rho:
        new = []
        for r in r_i:
            lo, hi = sorted(((1.0 - theta) * r, (1.0 + theta) * r))
            new.append(float(rng.uniform(lo, hi)) if hi > lo else r)
        rho.append(tuple(new))
    return ActionSequence(seq.sigma, tuple(rho))


def _stream(seed: int, instance_key: int, theta_index: int, sample: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, instance_key, theta_index, sample]))


def instance_key(instance_id) -> int:
    return zlib.crc32(str(instance_id).encode())


def success_probability(model: Model, catalog: Catalog, x0, seq: ActionSequence, theta: float,
                        cfg: RobustnessConfig = RobustnessConfig(), *, key: int = 0,
                        theta_index: int = 0) -> float:
    """Fraction of perturbed copies of ``seq`` that remain feasible solutions."""
    ok = 0
    for s in range(cfg.samples):
        rng = _stream(cfg.seed, key, theta_index, s)
        if check_feasible(catalog, perturb(seq, theta, rng), x0, model).feasible:
            ok += 1
    return ok / cfg.samples


def relative_margin(model: Model, x_k) -> float:
    """(g1 - g0) / g1 at the solution endpoint."""
    g0, g1 = model.logits(np.asarray(x_k, dtype=float))
    if abs(g1) < MARGIN_EPS:
        raise ValueError(f"relative margin undefined: |g1| = {abs(g1):.3g}")
    return (g1 - g0) / g1


def margin_stats(margins: Sequence[float | None]) -> tuple[float, float, int]:
    """Mean and population standard deviation, skipping undefined entries."""
    vals = [m for m in margins if m is not None and math.isfinite(m)]
    if not vals:
        return math.nan, math.nan, 0
    arr = np.asarray(vals)
    return float(arr.mean()), float(arr.std(ddof=0)), len(vals)


@dataclass
class RobustnessReport:
    rows: list[dict]   # instance_id, theta, success_prob, margin
    curve: list[dict]  # theta, fraction, n

    def margin_summary(self) -> dict:
        seen = {}
        for r in self.rows:
            seen.setdefault(r["instance_id"], r["margin"])
        mean, sd, n = margin_stats(list(seen.values()))
        return {"mean": mean, "sd": sd, "n": n}


def robustness_curve(model: Model, catalog: Catalog, solutions: Sequence[Solution],
                     cfg: RobustnessConfig = RobustnessConfig()) -> RobustnessReport:
    """For each theta, the fraction of solutions with success probability >= threshold."""
    if not solutions:
        raise ValueError("no solutions to evaluate")
    rows = []
    for sol in solutions:
        end = trajectory(catalog, sol.seq.sigma, sol.seq.rho, sol.x0)[-1]
        try:
            margin = relative_margin(model, end)
        except ValueError as exc:
            log.warning("instance %s: %s; excluded from margin statistics", sol.instance_id, exc)
            margin = None
        key = instance_key(sol.instance_id)
        for ti, theta in enumerate(cfg.thetas):
            p = success_probability(model, catalog, sol.x0, sol.seq, theta, cfg, key=key, theta_index=ti)
            rows.append({"instance_id": sol.instance_id, "theta": theta, "success_prob": p, "margin": margin})
    curve = []
    for ti, theta in enumerate(cfg.thetas):
        probs = [r["success_prob"] for r in rows if r["theta"] == theta]
        curve.append({"theta": theta,
                      "fraction": sum(p >= cfg.threshold for p in probs) / len(probs),
                      "n": len(probs)})
    return RobustnessReport(rows, curve)


def write_robustness_csv(report: RobustnessReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "theta", "success_prob", "margin"])
        for r in report.rows:
            w.writerow([r["instance_id"], r["theta"], r["success_prob"],
                        "" if r["margin"] is None else repr(r["margin"])])


def curve_json(report: RobustnessReport, cfg: RobustnessConfig) -> dict:
    return {"threshold": cfg.threshold, "samples": cfg.samples, "seed": cfg.seed,
            "curve": report.curve, "margin": report.margin_summary()}


def write_curve_json(report: RobustnessReport, cfg: RobustnessConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(curve_json(report, cfg), fh, indent=2)

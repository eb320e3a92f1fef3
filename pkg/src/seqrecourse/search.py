"""Score-guided enumeration of action sequences.

Starting from the empty sequence, repeatedly pick the (sequence, action)
pair with the lowest score, optimize the parameters of the extended
sequence, and add it to the explored set. When the stop rule fires, return
the cheapest explored sequence that satisfies every exact precondition and
flips the classifier.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .actions import ActionError, ActionSequence, Catalog, check_feasible, trajectory
from .autodiff import AutodiffError
from .cwopt import CWConfig, OptResult, hinge, optimize
from .nnmodel import Instance, Model

log = logging.getLogger(__name__)

SCORE_FUNCTIONS = ("vanilla", "objective", "gradient")


class AlreadyPositiveError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    score_fn: str = "vanilla"
    max_length: int = 3
    budget: int | None = None
    cost_bound: float | None = None
    workers: int = 1
    seed: int = 0
    warm_start: bool = True
    cw: CWConfig = field(default_factory=CWConfig)

    def __post_init__(self):
        if self.score_fn not in SCORE_FUNCTIONS:
            raise ValueError(f"score_fn must be one of {SCORE_FUNCTIONS}")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.budget is not None and self.budget < 0:
            raise ValueError("budget must be non-negative")


@dataclass
class Candidate:
    seq: ActionSequence
    opt: OptResult | None
    feasible: bool
    exact_cost: float
    objective: float
    index: int
    endpoint: np.ndarray
    iteration: int = 0
    score: float = 0.0
    diagnostic: str = ""
    _grad: np.ndarray | None = field(default=None, repr=False)

    @property
    def sigma(self) -> tuple[int, ...]:
        return self.seq.sigma

    @property
    def h(self) -> float:
        return self.opt.h_value if self.opt is not None else math.nan

    @property
    def flipped(self) -> bool:
        return self.opt is not None and self.opt.flipped


@dataclass
class SearchResult:
    best: Candidate | None
    explored: list[Candidate]
    iterations_to_best: int | None
    log: list[dict]
    root: Candidate

    @property
    def calls(self) -> int:
        return len(self.explored)


# -- score functions --------------------------------------------------------

def score_vanilla(seq: ActionSequence, rho=None, a: int | None = None) -> float:
    """Length of the extended sequence; yields breadth-first order."""
    return float(len(seq) + 1)


def score_objective(candidate: Candidate, a: int | None = None) -> float:
    """Relaxed objective value the candidate was optimized to; ignores ``a``."""
    return float(candidate.objective)


def score_gradient(candidate: Candidate, a: int, model: Model, catalog: Catalog) -> float:
    """Negated mean |d loss / d x_j| over the footprint of action ``a`` at the candidate's endpoint."""
    if candidate._grad is None:
        candidate._grad = np.abs(model.loss_gradient(candidate.endpoint))
    fp = sorted(catalog.actions[a].footprint)
    if not fp:
        return 0.0
    return -float(np.mean(candidate._grad[fp]))


def _score(cfg: SearchConfig, cand: Candidate, a: int, model: Model, catalog: Catalog) -> float:
    if cfg.score_fn == "vanilla":
        return score_vanilla(cand.seq, cand.seq.rho, a)
    if cfg.score_fn == "objective":
        return score_objective(cand, a)
    return score_gradient(cand, a, model, catalog)


# -- worker ------------------------------------------------------------------

_WORKER: dict = {}


def _init_worker(model, catalog, x0, cw):
    _WORKER.update(model=model, catalog=catalog, x0=x0, cw=cw)


def _run_one(sigma, rho_init):
    w = _WORKER
    return _optimize_safely(w["model"], w["catalog"], sigma, w["x0"], w["cw"], rho_init)


def _optimize_safely(model, catalog, sigma, x0, cw, rho_init):
    try:
        return optimize(model, catalog, sigma, x0, cw, rho_init), ""
    except (ActionError, AutodiffError, ArithmeticError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


# -- synthesis ---------------------------------------------------------------

def _endpoint(catalog: Catalog, seq: ActionSequence, x0) -> np.ndarray:
    try:
        return np.asarray(trajectory(catalog, seq.sigma, seq.rho, x0)[-1], dtype=float)
    except ActionError:
        return np.asarray(x0, dtype=float)


def _make_candidate(catalog, x0, sigma, opt, diag, index, iteration, score) -> Candidate:
    if opt is None:
        seq = catalog.sequence(sigma)
        return Candidate(seq, None, False, math.inf, math.inf, index,
                         _endpoint(catalog, seq, x0), iteration, score, diag)
    seq = ActionSequence(opt.sigma, opt.rho_star)
    return Candidate(seq, opt, opt.feasible, opt.exact_cost, opt.objective, index,
                     _endpoint(catalog, seq, x0), iteration, score, opt.diagnostic)


def _json_num(v: float):
    return v if math.isfinite(v) else None


def synthesize(model: Model, x0, catalog: Catalog, cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Search sequences up to ``cfg.max_length`` for a minimum-cost flip of ``x0``."""
    x0 = np.asarray(getattr(x0, "raw", x0), dtype=float)
    if model.predict(x0) != 0:
        raise AlreadyPositiveError("instance is already positively classified")

    root = Candidate(ActionSequence(), None, False, 0.0, cfg.cw.c_init * hinge(model, x0), 0, x0.copy())
    S = [root]
    visited = {()}
    frontier: list[tuple[float, int, int]] = []
    records: list[dict] = []

    def expand(cand: Candidate):
        if len(cand.sigma) >= cfg.max_length:
            return
        for a in range(len(catalog)):
            if cand.sigma + (a,) in visited:
                continue
            heapq.heappush(frontier, (_score(cfg, cand, a, model, catalog), cand.index, a))

    expand(root)
    pool = None
    if cfg.workers > 1:
        pool = ProcessPoolExecutor(cfg.workers, initializer=_init_worker,
                                   initargs=(model, catalog, x0, cfg.cw))
    try:
        stop = False
        while frontier and not stop:
            room = cfg.workers
            if cfg.budget is not None:
                room = min(room, cfg.budget - (len(S) - 1))
                if room <= 0:
                    break
            batch = []
            while frontier and len(batch) < room:
                score, parent_idx, a = heapq.heappop(frontier)
                sigma = S[parent_idx].sigma + (a,)
                if sigma in visited:
                    continue
                visited.add(sigma)
                parent = S[parent_idx]
                rho_init = None
                if cfg.warm_start:
                    rho_init = [*parent.seq.rho, (0.0,) * catalog.actions[a].param_count]
                batch.append((score, sigma, rho_init))

            if pool is None:
                outcomes = [_optimize_safely(model, catalog, s, x0, cfg.cw, r) for _, s, r in batch]
            else:
                futures = [pool.submit(_run_one, s, r) for _, s, r in batch]
                outcomes = [f.result() for f in futures]

            for (score, sigma, _), (opt, diag) in zip(batch, outcomes):
                cand = _make_candidate(catalog, x0, sigma, opt, diag, len(S), len(S), score)
                if diag:
                    log.warning("sequence %s: %s", [catalog.actions[i].name for i in sigma], diag)
                S.append(cand)
                records.append({
                    "iter": cand.iteration,
                    "sigma": [catalog.actions[i].name for i in sigma],
                    "score": _json_num(score),
                    "objective": _json_num(cand.objective),
                    "exact_cost": _json_num(cand.exact_cost),
                    "h": _json_num(cand.h),
                    "feasible": cand.feasible,
                    "flipped": cand.flipped,
                })
                expand(cand)
                if cfg.cost_bound is not None and cand.feasible and cand.exact_cost <= cfg.cost_bound:
                    stop = True
    finally:
        if pool is not None:
            pool.shutdown()

    explored = S[1:]
    best = select_best(explored)
    if best is not None:
        again = check_feasible(catalog, best.seq, x0, model)
        if not again.feasible:  # pragma: no cover - guards against stale flags
            raise AssertionError(f"best sequence {best.sigma} failed re-validation")
    return SearchResult(best, explored, best.iteration if best else None, records, root)


def select_best(candidates: Iterable[Candidate]) -> Candidate | None:
    """Cheapest feasible candidate; ties go to the shorter, then the earlier one."""
    feas = [c for c in candidates if c.feasible]
    if not feas:
        return None
    return min(feas, key=lambda c: (c.exact_cost, len(c.sigma), c.index))


def write_log_jsonl(result: SearchResult, path) -> None:
    with open(path, "w") as fh:
        for r in result.log:
            fh.write(json.dumps(r) + "\n")


# -- sweeps ------------------------------------------------------------------

SWEEP_COLUMNS = ["instance_id", "score_fn", "iterations_to_best", "best_cost", "best_length", "calls", "solved"]


def sweep(model: Model, instances: Sequence[Instance], catalog: Catalog, cfg: SearchConfig = SearchConfig(),
          score_fns: Sequence[str] = SCORE_FUNCTIONS) -> list[dict]:
    """Run every score function on every instance; one row per pair."""
    rows = []
    for inst in instances:
        for fn in score_fns:
            res = synthesize(model, inst.raw, catalog, replace(cfg, score_fn=fn))
            b = res.best
            rows.append({
                "instance_id": inst.id,
                "score_fn": fn,
                "iterations_to_best": res.iterations_to_best,
                "best_cost": b.exact_cost if b else None,
                "best_length": len(b.sigma) if b else None,
                "calls": res.calls,
                "solved": b is not None,
            })
    return rows


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else r[k]) for k in SWEEP_COLUMNS})


def sweep_plot_data(rows: Sequence[dict]) -> dict:
    """Per-instance iteration pairs for each score-function comparison."""
    by_inst: dict[str, dict[str, int | None]] = {}
    for r in rows:
        by_inst.setdefault(r["instance_id"], {})[r["score_fn"]] = r["iterations_to_best"]
    pairs = {}
    for a, b in (("vanilla", "gradient"), ("vanilla", "objective"), ("objective", "gradient")):
        pts = []
        for inst, its in by_inst.items():
            if its.get(a) is not None and its.get(b) is not None:
                pts.append({"instance_id": inst, a: its[a], b: its[b]})
        pairs[f"{a}_vs_{b}"] = pts
    return {"metric": "iterations_to_best", "pairs": pairs}

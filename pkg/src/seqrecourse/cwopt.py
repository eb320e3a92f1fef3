"""Parameter learning for a fixed action sequence.

The objective minimized over the parameters is::

    c * h(x_k) + sum_i [cost_i(x_{i-1}, rho_i) + relaxed_pre_i(x_{i-1}, rho_i)]

with ``h(x) = max(0, g(x)_0 - g(x)_1)``. Adam runs on it while ``c`` and the
schedule interval ``t`` adapt to whether the decision boundary has been
reached.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .actions import Catalog, check_feasible, sequence_cost, step_terms, trajectory
from .exprlang import holds
from .nnmodel import Model


@dataclass(frozen=True)
class CWConfig:
    c_init: float = 1e5
    t_init: int = 100
    c_min: float = 1e-5
    c_max: float = 1e10
    max_iters: int = 10000
    check_interval: int = 100
    min_decrease: float = 1e-4
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init_jitter: float = 0.0

    def __post_init__(self):
        for name in ("c_init", "t_init", "c_min", "c_max", "max_iters", "check_interval", "lr", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.c_min <= self.c_init <= self.c_max:
            raise ValueError("c_init must lie within [c_min, c_max]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.min_decrease < 0 or self.init_jitter < 0:
            raise ValueError("min_decrease and init_jitter must be non-negative")


@dataclass(frozen=True)
class TraceRow:
    iter: int
    c: float
    t: int
    h: float
    objective: float


@dataclass
class OptResult:
    sigma: tuple[int, ...]
    rho_star: tuple[tuple[float, ...], ...]
    objective: float
    exact_cost: float
    relaxed_cost: float
    h_value: float
    c: float
    feasible: bool
    preconds_ok: bool
    flipped: bool
    flipped_during_opt: bool
    iterations: int
    trace: list[TraceRow] = field(default_factory=list)
    best_trace: list[tuple[int, tuple]] = field(default_factory=list)
    aborted: bool = False
    diagnostic: str = ""

    def write_trace_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "c", "t", "h", "objective"])
            for r in self.trace:
                w.writerow([r.iter, repr(r.c), r.t, repr(r.h), repr(r.objective)])


class Objective:
    """The relaxed objective of one sequence, unrolled onto a tape.

    Input slots: ``c`` first, then one slot per continuous parameter in
    sequence order (named ``"<step>.<param>"``).
    """

    def __init__(self, model: Model, catalog: Catalog, sigma: Sequence[int], x0,
                 tape: ad.Tape | None = None):
        self.model = model
        self.catalog = catalog
        self.sigma = tuple(sigma)
        self.x0 = [float(v) for v in x0]
        self.tape = tape = tape if tape is not None else ad.Tape()
        self.c = tape.input("c")
        self.params: list[list[ad.Var]] = []
        self.scales: list[float] = []
        for step, i in enumerate(self.sigma):
            a = catalog.actions[i]
            self.params.append([tape.input(f"{step}.{j}") for j in range(a.param_count)])
            self.scales.extend(a.param_scales)

        states = trajectory(catalog, self.sigma, self.params, self.x0)
        exact = 0.0
        relaxed = 0.0
        self.atoms = []
        for step, i in enumerate(self.sigma):
            t = step_terms(catalog.actions[i], states[step], self.params[step], self.x0,
                           catalog.schema, with_atoms=True)
            exact = exact + t.cost
            relaxed = relaxed + t.cost + t.relaxation
            self.atoms.extend((atom.cmp, lhs, rhs) for atom, lhs, rhs in t.atoms)
        self.endpoint = states[-1]
        self.g0, self.g1 = model.logits(self.endpoint)
        self.h = ad.relu(self.g0 - self.g1)
        obj = self.c * self.h + relaxed
        self.exact = tape.lift(exact)
        self.relaxed = tape.lift(relaxed)
        self.root = tape.lift(obj)
        self.param_ids = [v.id for step in self.params for v in step]

    @property
    def n_params(self) -> int:
        return len(self.param_ids)

    def split(self, theta: Sequence[float]) -> tuple[tuple[float, ...], ...]:
        out, k = [], 0
        for step in self.params:
            out.append(tuple(float(v) for v in theta[k:k + len(step)]))
            k += len(step)
        return tuple(out)

    def evaluate(self, c: float, theta: Sequence[float]):
        return self.tape.forward_slots([c, *theta])

    def gradient(self) -> np.ndarray:
        adj = self.tape.sweep_back(self.root)
        return np.array([adj[i] for i in self.param_ids])

    def _val(self, v) -> float:
        return float(self.tape._values[v.id]) if isinstance(v, ad.Var) else float(v)

    def status(self) -> tuple[bool, bool, float, float, float]:
        """(preconds_ok, flipped, exact_cost, h, objective) from the last forward pass."""
        val = self._val
        ok = all(holds(cmp, val(l), val(r)) for cmp, l, r in self.atoms)
        flipped = val(self.g1) > val(self.g0)
        return ok, flipped, val(self.exact), val(self.h), val(self.root)


def build_objective(model: Model, catalog: Catalog, sigma: Sequence[int], x0,
                    tape: ad.Tape | None = None) -> Objective:
    if not sigma:
        raise ValueError("sigma must be non-empty")
    return Objective(model, catalog, sigma, x0, tape)


def hinge(model: Model, x) -> float:
    g0, g1 = model.logits(np.asarray(x, dtype=float))
    return max(0.0, g0 - g1)


def update_schedule(c: float, t: int, h_now: float, ever_reached: bool,
                    cfg: CWConfig = CWConfig()) -> tuple[float, int]:
    """Adapt ``c`` and the interval ``t`` at a schedule check.

    On the boundary (``h == 0``): c/10, t*2. Still on the 0 side: c*2, and if
    the boundary had been reached before, also t/2. ``c`` is clamped to
    ``[c_min, c_max]``, ``t`` floored to an integer >= 1.
    """
    if h_now == 0:
        c, t = c / 10.0, t * 2
    elif not ever_reached:
        c = c * 2.0
    else:
        c, t = c * 2.0, t / 2
    c = min(max(c, cfg.c_min), cfg.c_max)
    return c, max(1, int(math.floor(t)))


class Adam:
    """Adam on an unscaled copy of the parameters (``u = theta / scale``)."""

    def __init__(self, scales: np.ndarray, lr: float, beta1: float, beta2: float, eps: float):
        self.scales = scales
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros_like(scales)
        self.v = np.zeros_like(scales)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        g = grad * self.scales
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * g
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * (g * g)
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        u = theta / self.scales - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return u * self.scales


def _key(ok: bool, flipped: bool, cost: float, h: float) -> tuple:
    return (0, cost, h) if ok and flipped else (1, h, cost)


def _finish(model, catalog, obj, sigma, x0, rho, c, **kw) -> OptResult:
    seq = catalog.sequence(sigma, rho)
    fz = check_feasible(catalog, seq, x0, model)
    sc = sequence_cost(catalog, seq, x0)
    h = hinge(model, trajectory(catalog, seq.sigma, seq.rho, x0)[-1])
    return OptResult(sigma=tuple(sigma), rho_star=seq.rho, objective=c * h + sc.relaxed_cost,
                     exact_cost=sc.exact_cost, relaxed_cost=sc.relaxed_cost, h_value=h, c=c,
                     feasible=fz.feasible, preconds_ok=fz.preconds_ok, flipped=fz.flipped, **kw)


def optimize(model: Model, catalog: Catalog, sigma: Sequence[int], x0, cfg: CWConfig = CWConfig(),
             rho_init: Sequence[Sequence[float]] | None = None) -> OptResult:
    """Minimize the relaxed objective over the parameters of ``sigma``.

    The returned parameters are the best iterate seen, ranked feasible
    (exact preconditions hold and the endpoint is classified 1) first, by
    exact cost then h; infeasible iterates rank by h then exact cost.
    Raises :class:`ArithmeticError`/:class:`ActionError` only if the very
    first evaluation fails; later failures stop the run and are reported in
    ``diagnostic`` with ``aborted=True``.
    """
    sigma = tuple(sigma)
    obj = build_objective(model, catalog, sigma, x0)
    scales = np.asarray(obj.scales, dtype=float)
    if rho_init is None:
        theta = np.zeros(obj.n_params)
    else:
        theta = np.array([float(v) for r in rho_init for v in r], dtype=float)
        if theta.shape != (obj.n_params,):
            raise ValueError(f"rho_init has {theta.size} values, sequence takes {obj.n_params}")
    if cfg.init_jitter > 0 and obj.n_params:
        rng = np.random.default_rng(cfg.seed)
        theta = theta + rng.normal(0.0, cfg.init_jitter, obj.n_params) * scales

    c, t = float(cfg.c_init), int(cfg.t_init)
    obj.evaluate(c, theta)
    ok, flipped, cost, h, val = obj.status()
    best_key = _key(ok, flipped, cost, h)
    best_theta, best_c = theta.copy(), c
    best_trace = [(0, best_key)]
    trace = [TraceRow(0, c, t, h, val)]
    any_flip = flipped
    if obj.n_params == 0:
        return _finish(model, catalog, obj, sigma, x0, obj.split(theta), c, flipped_during_opt=any_flip,
                       iterations=0, trace=trace, best_trace=best_trace)

    adam = Adam(scales, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    h_ref = h
    reached = False
    since = 0
    it = 0
    aborted, diag = False, ""
    for it in range(1, cfg.max_iters + 1):
        grad = obj.gradient()
        theta = adam.step(theta, grad)
        try:
            if not np.all(np.isfinite(theta)):
                raise ad.NonFiniteError("parameters became non-finite")
            obj.evaluate(c, theta)
        except (ad.AutodiffError, ArithmeticError) as exc:
            aborted, diag = True, f"iteration {it}: {exc}"
            break
        ok, flipped, cost, h, val = obj.status()
        any_flip = any_flip or flipped
        key = _key(ok, flipped, cost, h)
        if key < best_key:
            if key[0] == 0:
                # tape and plain evaluation may disagree on a razor-thin boundary
                seq = catalog.sequence(sigma, obj.split(theta))
                if not check_feasible(catalog, seq, x0, model).feasible:
                    key = (1, h, cost)
            if key < best_key:
                best_key, best_theta, best_c = key, theta.copy(), c
                best_trace.append((it, key))

        since += 1
        if since >= t:
            c, t = update_schedule(c, t, h, reached, cfg)
            reached = reached or h == 0
            since = 0
        if it % cfg.check_interval == 0:
            trace.append(TraceRow(it, c, t, h, val))
            if h_ref - h < cfg.min_decrease:
                break
            h_ref = h

    return _finish(model, catalog, obj, sigma, x0, obj.split(best_theta), best_c,
                   flipped_during_opt=any_flip, iterations=it, trace=trace, best_trace=best_trace,
                   aborted=aborted, diagnostic=diag)

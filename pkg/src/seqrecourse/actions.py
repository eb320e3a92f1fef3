"""Action catalogs: parameterized feature transforms with costs and preconditions.

Catalog file::

    {"actions": [
      {"name": "Wait Years", "kind": "continuous",
       "params": [{"name": "years", "scale": 1.0}],      # or just a count
       "transforms": [{"feature": "age", "expr": "x[age] + p[0]"}],
       "cost_expr": "abs(p[0])",
       "precondition_expr": "x[age] < x[age] + p[0] && x[age] + p[0] < 120",
       "relaxation": {"0": {"tau": 9.52, "tau_prime": 9.52}}},   # optional, by atom index
      {"name": "Get Guarantor", "kind": "categorical",
       "transforms": [{"group": "guarantor", "set_to": "yes"}],
       "cost_expr": "5", "precondition_expr": "x[guarantor=none] > 0.5"}
    ]}

A bare list of actions is accepted too. A parameter's ``scale`` is the unit
the optimizer takes steps in; it does not change the meaning of ``p[i]``.

Transforms of one action all read the state *before* the action
(simultaneous assignment). Preconditions are functions of that pre-action
state and the parameters; post-action constraints are written in terms of
the transform expressions, e.g. ``x[age] + p[0] < 120``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .exprlang import (
    Atom,
    Env,
    Expr,
    Pred,
    check_names,
    emit,
    evaluate,
    eval_pred,
    features_in,
    parse_expr,
    parse_pred,
    slack,
)
from .nnmodel import FeatureSchema, Model

TAU_NUMERATOR = 1000.0
COST_PROBES = 256


class CatalogError(ValueError):
    pass


class ActionError(RuntimeError):
    """Evaluation failure inside a named action."""

    def __init__(self, action: str, cause: Exception):
        super().__init__(f"action {action!r}: {cause}")
        self.action = action
        self.cause = cause


@dataclass(frozen=True)
class RelaxationConfig:
    """Steepness of one precondition atom's penalty ``tau * exp(-tau_prime * slack)``."""

    tau: float
    tau_prime: float

    def __post_init__(self):
        for v in (self.tau, self.tau_prime):
            if not (math.isfinite(v) and v > 0):
                raise CatalogError(f"tau and tau_prime must be positive and finite, got {v!r}")

    @classmethod
    def for_span(cls, s: float) -> "RelaxationConfig":
        """Default rule: boundary effect begins roughly 1% of the domain away."""
        return cls(TAU_NUMERATOR / s, TAU_NUMERATOR / s)


@dataclass(frozen=True)
class ActionSpec:
    name: str
    kind: str  # "continuous" | "categorical"
    param_names: tuple[str, ...]
    param_scales: tuple[float, ...]
    transforms: tuple[tuple[int, Expr], ...]
    assignments: tuple[tuple[str, str], ...]  # categorical: (group, category)
    cost: Expr
    precondition: Pred
    relax: tuple[RelaxationConfig | None, ...]
    footprint: frozenset[int]
    onehot_targets: tuple[tuple[tuple[int, ...], int], ...] = field(default=(), repr=False)

    @property
    def param_count(self) -> int:
        return len(self.param_names)

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"


@dataclass(frozen=True)
class ActionSequence:
    """Action indices ``sigma`` (0-based into the catalog) and their parameters ``rho``."""

    sigma: tuple[int, ...] = ()
    rho: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if len(self.sigma) != len(self.rho):
            raise ValueError("sigma and rho must have the same length")

    def __len__(self) -> int:
        return len(self.sigma)


@dataclass(frozen=True)
class Catalog:
    actions: tuple[ActionSpec, ...]
    schema: FeatureSchema

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, i: int) -> ActionSpec:
        return self.actions[i]

    def index(self, name: str) -> int:
        for i, a in enumerate(self.actions):
            if a.name == name:
                return i
        raise KeyError(f"no action named {name!r}")

    def sequence(self, sigma: Sequence[int], rho=None) -> ActionSequence:
        """Build a sequence, defaulting every parameter to zero."""
        sigma = tuple(int(i) for i in sigma)
        for i in sigma:
            if not 0 <= i < len(self.actions):
                raise IndexError(f"action index {i} out of range")
        if rho is None:
            rho = tuple((0.0,) * self.actions[i].param_count for i in sigma)
        rho = tuple(tuple(float(v) for v in r) for r in rho)
        for i, r in zip(sigma, rho):
            if len(r) != self.actions[i].param_count:
                raise ValueError(f"action {self.actions[i].name!r} takes "
                                 f"{self.actions[i].param_count} parameter(s), got {len(r)}")
        return ActionSequence(sigma, rho)


# -- application -----------------------------------------------------------

def apply_action(a: ActionSpec, x: Sequence, rho_i: Sequence, x0: Sequence[float],
                 schema: FeatureSchema) -> list:
    """State after applying ``a`` with parameters ``rho_i`` to ``x``."""
    if len(rho_i) != a.param_count:
        raise ValueError(f"action {a.name!r} takes {a.param_count} parameter(s), got {len(rho_i)}")
    out = list(x)
    if a.is_categorical:
        for members, target in a.onehot_targets:
            for j in members:
                out[j] = 1.0 if j == target else 0.0
        return out
    env = Env(schema, x, x0, rho_i)
    try:
        new = [(j, emit(e, env)) for j, e in a.transforms]
    except (ad.AutodiffError, ArithmeticError, ValueError) as exc:
        raise ActionError(a.name, exc) from exc
    for j, v in new:
        out[j] = v
    return out


def trajectory(catalog: Catalog, sigma: Sequence[int], rho: Sequence[Sequence], x0) -> list[list]:
    """States ``x_0 .. x_k``; works on floats or tape handles."""
    x0f = [float(v) for v in x0]
    states = [list(x0f)]
    x = states[0]
    for i, r in zip(sigma, rho):
        x = apply_action(catalog.actions[i], x, r, x0f, catalog.schema)
        states.append(x)
    return states


def apply_sequence(catalog: Catalog, seq: ActionSequence, x0) -> list[np.ndarray]:
    return [np.asarray(s, dtype=float) for s in trajectory(catalog, seq.sigma, seq.rho, x0)]


# -- relaxation and cost ---------------------------------------------------

def relax_atom(atom: Atom, cfg: RelaxationConfig, env: Env):
    """Penalty ``tau * exp(-tau_prime * slack)``; equals ``tau`` on the boundary."""
    return cfg.tau * ad.exp(-cfg.tau_prime * slack(atom, env))


def relax_pred(pred: Pred, cfgs: Sequence[RelaxationConfig], env: Env):
    """Conjunction relaxes to the sum of its atoms' penalties."""
    total = 0.0
    for atom, cfg in zip(pred.atoms, cfgs):
        total = total + relax_atom(atom, cfg, env)
    return total


@dataclass
class StepTerms:
    cost: object
    relaxation: object
    atoms: list  # (Atom, lhs, rhs) evaluated at this step


def step_terms(a: ActionSpec, x_prev: Sequence, rho_i: Sequence, x0: Sequence[float],
               schema: FeatureSchema, with_atoms: bool = False) -> StepTerms:
    env = Env(schema, x_prev, x0, rho_i)
    try:
        cost = emit(a.cost, env)
        relax = 0.0 if a.is_categorical else relax_pred(a.precondition, a.relax, env)
        atoms = []
        if with_atoms:
            atoms = [(atom, emit(atom.lhs, env), emit(atom.rhs, env)) for atom in a.precondition.atoms]
    except (ad.AutodiffError, ArithmeticError, ValueError) as exc:
        raise ActionError(a.name, exc) from exc
    return StepTerms(cost, relax, atoms)


@dataclass(frozen=True)
class SequenceCost:
    exact_cost: float
    relaxed_cost: float


def sequence_cost(catalog: Catalog, seq: ActionSequence, x0) -> SequenceCost:
    states = trajectory(catalog, seq.sigma, seq.rho, x0)
    x0f = states[0]
    exact = 0.0
    relaxed = 0.0
    for step, (i, r) in enumerate(zip(seq.sigma, seq.rho)):
        t = step_terms(catalog.actions[i], states[step], r, x0f, catalog.schema)
        exact += t.cost
        relaxed += t.cost + t.relaxation
    return SequenceCost(float(exact), float(relaxed))


def preconditions_hold(catalog: Catalog, seq: ActionSequence, states: Sequence, x0) -> bool:
    x0f = [float(v) for v in x0]
    for step, (i, r) in enumerate(zip(seq.sigma, seq.rho)):
        if not eval_pred(catalog.actions[i].precondition, Env(catalog.schema, states[step], x0f, r)):
            return False
    return True


@dataclass(frozen=True)
class Feasibility:
    preconds_ok: bool
    flipped: bool

    @property
    def feasible(self) -> bool:
        return self.preconds_ok and self.flipped


def check_feasible(catalog: Catalog, seq: ActionSequence, x0, model: Model) -> Feasibility:
    """Exact Problem constraints: preconditions along the trajectory, and f(x_k) = 1."""
    try:
        states = trajectory(catalog, seq.sigma, seq.rho, x0)
        ok = preconditions_hold(catalog, seq, states, x0)
    except ActionError:
        return Feasibility(False, False)
    return Feasibility(ok, model.predict(np.asarray(states[-1], dtype=float)) == 1)


# -- rendering -------------------------------------------------------------

def describe_step(catalog: Catalog, a: ActionSpec, before: Sequence[float], after: Sequence[float]) -> str:
    if a.is_categorical:
        parts = [f"set {g} to {c}" for g, c in a.assignments]
        return f"{a.name}: " + ", ".join(parts)
    parts = []
    for j in sorted(a.footprint):
        d = float(after[j]) - float(before[j])
        if d == 0:
            continue
        verb = "Increase" if d > 0 else "Decrease"
        parts.append(f"{verb} {catalog.schema.features[j].name} by {abs(d):.4g}")
    return f"{a.name}: " + ("; ".join(parts) if parts else "no change")


# -- loading ---------------------------------------------------------------

_CONT_FIELDS = {"name", "kind", "params", "transforms", "cost_expr", "precondition_expr", "relaxation"}
_CAT_FIELDS = {"name", "kind", "transforms", "cost_expr", "precondition_expr", "params"}


def _default_relax(atom: Atom, schema: FeatureSchema, where: str) -> RelaxationConfig:
    refs = features_in(atom)
    names = {n for _, n in refs}
    if len(names) != 1:
        raise CatalogError(
            f"{where}: atom references {len(names)} features {sorted(names)}; "
            "supply tau/tau_prime explicitly")
    (name,) = names
    spaces = {s for s, _ in refs}
    j = schema.index(name)
    if spaces == {"xn"}:
        s = schema.normalized_span(j)
    elif "xn" not in spaces:
        s = schema.features[j].span
    else:
        raise CatalogError(f"{where}: atom mixes raw and normalized references to {name!r}; "
                           "supply tau/tau_prime explicitly")
    return RelaxationConfig.for_span(s)


def _parse_params(raw, where: str) -> tuple[tuple[str, ...], tuple[float, ...]]:
    if raw is None:
        return (), ()
    if isinstance(raw, int):
        return tuple(f"p{i}" for i in range(raw)), (1.0,) * raw
    names, scales = [], []
    for i, p in enumerate(raw):
        if isinstance(p, str):
            names.append(p)
            scales.append(1.0)
            continue
        extra = set(p) - {"name", "scale"}
        if extra:
            raise CatalogError(f"{where}.params[{i}]: unknown field(s) {sorted(extra)}")
        s = float(p.get("scale", 1.0))
        if not s > 0:
            raise CatalogError(f"{where}.params[{i}]: scale must be positive")
        names.append(p.get("name", f"p{i}"))
        scales.append(s)
    return tuple(names), tuple(scales)


def action_from_json(d: dict, schema: FeatureSchema, i: int = 0) -> ActionSpec:
    where = f"actions[{i}]"
    if not isinstance(d, dict):
        raise CatalogError(f"{where}: expected an object")
    name = d.get("name")
    if not name:
        raise CatalogError(f"{where}: missing name")
    where = f"action {name!r}"
    kind = d.get("kind", "continuous")
    allowed = _CONT_FIELDS if kind == "continuous" else _CAT_FIELDS
    if kind not in ("continuous", "categorical"):
        raise CatalogError(f"{where}: unknown kind {kind!r}")
    extra = set(d) - allowed
    if extra:
        raise CatalogError(f"{where}: unknown field(s) {sorted(extra)}")

    try:
        cost = parse_expr(str(d.get("cost_expr", "0")))
        pre = parse_pred(str(d.get("precondition_expr", "")))
    except ValueError as exc:
        raise CatalogError(f"{where}: {exc}") from exc

    if kind == "categorical":
        if d.get("params") not in (None, 0, []):
            raise CatalogError(f"{where}: categorical actions take no parameters")
        assignments, targets, footprint = [], [], set()
        for t in d.get("transforms", []):
            if set(t) != {"group", "set_to"}:
                raise CatalogError(f"{where}: categorical transforms need exactly group and set_to")
            g, c = t["group"], str(t["set_to"])
            if g not in schema.groups:
                raise CatalogError(f"{where}: unknown one-hot group {g!r}")
            try:
                target = schema.group_member(g, c)
            except KeyError as exc:
                raise CatalogError(f"{where}: {exc.args[0]}") from None
            assignments.append((g, c))
            targets.append((schema.groups[g], target))
            footprint.update(schema.groups[g])
        if not assignments:
            raise CatalogError(f"{where}: categorical action sets no group")
        for node, label in ((cost, "cost"), (pre, "precondition")):
            _check(node, schema, 0, f"{where} {label}")
        return ActionSpec(name, kind, (), (), (), tuple(assignments), cost, pre,
                          (None,) * len(pre.atoms), frozenset(footprint), tuple(targets))

    pnames, pscales = _parse_params(d.get("params", 0), where)
    transforms = []
    seen = set()
    for t in d.get("transforms", []):
        if set(t) != {"feature", "expr"}:
            raise CatalogError(f"{where}: continuous transforms need exactly feature and expr")
        if t["feature"] not in schema:
            raise CatalogError(f"{where}: unknown feature {t['feature']!r}")
        j = schema.index(t["feature"])
        if j in seen:
            raise CatalogError(f"{where}: feature {t['feature']!r} assigned twice")
        seen.add(j)
        try:
            e = parse_expr(str(t["expr"]))
        except ValueError as exc:
            raise CatalogError(f"{where} transform {t['feature']!r}: {exc}") from exc
        _check(e, schema, len(pnames), f"{where} transform {t['feature']!r}")
        transforms.append((j, e))
    if not transforms:
        raise CatalogError(f"{where}: continuous action has no transforms")
    _check(cost, schema, len(pnames), f"{where} cost")
    _check(pre, schema, len(pnames), f"{where} precondition")

    overrides = d.get("relaxation", {}) or {}
    relax = []
    for k, atom in enumerate(pre.atoms):
        o = overrides.get(str(k))
        if o is not None:
            if set(o) - {"tau", "tau_prime"}:
                raise CatalogError(f"{where}: relaxation override fields are tau, tau_prime")
            relax.append(RelaxationConfig(float(o["tau"]), float(o["tau_prime"])))
        else:
            relax.append(_default_relax(atom, schema, f"{where} precondition atom {k}"))
    bad = set(overrides) - {str(k) for k in range(len(pre.atoms))}
    if bad:
        raise CatalogError(f"{where}: relaxation overrides for nonexistent atoms {sorted(bad)}")
    return ActionSpec(name, kind, pnames, pscales, tuple(transforms), (), cost, pre,
                      tuple(relax), frozenset(j for j, _ in transforms))


def _check(node, schema, n_params, where):
    try:
        check_names(node, schema, n_params, where)
    except ValueError as exc:
        raise CatalogError(str(exc)) from exc


def probe_costs(catalog: Catalog, n: int = COST_PROBES, seed: int = 0) -> None:
    """Randomized check that every cost is >= 0 wherever its precondition holds."""
    rng = np.random.default_rng(seed)
    schema = catalog.schema
    for a in catalog.actions:
        for _ in range(n):
            x = np.empty(len(schema))
            for j, f in enumerate(schema.features):
                x[j] = rng.uniform(f.domain_min, f.domain_max) if f.kind == "numeric" else 0.0
            for members in schema.groups.values():
                x[members[rng.integers(len(members))]] = 1.0
            p = [rng.uniform(-10.0, 10.0) * s for s in a.param_scales]
            env = Env(schema, list(x), list(x), p)
            try:
                if not eval_pred(a.precondition, env):
                    continue
                c = evaluate(a.cost, env)
            except (ad.AutodiffError, ArithmeticError, ValueError):
                continue
            if not c >= 0:
                raise CatalogError(f"action {a.name!r}: cost {c!r} < 0 at a point satisfying its precondition")


def catalog_from_json(data, schema: FeatureSchema, probe: bool = True) -> Catalog:
    if isinstance(data, dict):
        if set(data) - {"actions"}:
            raise CatalogError(f"catalog: unknown field(s) {sorted(set(data) - {'actions'})}")
        data = data.get("actions", [])
    actions = tuple(action_from_json(d, schema, i) for i, d in enumerate(data))
    names = [a.name for a in actions]
    if len(set(names)) != len(names):
        raise CatalogError("catalog: duplicate action names")
    cat = Catalog(actions, schema)
    if probe:
        probe_costs(cat)
    return cat


def load_catalog(path: str | Path, schema: FeatureSchema) -> Catalog:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CatalogError(f"{path}: invalid JSON ({exc})") from exc
    return catalog_from_json(data, schema)

"""Central-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .tape import ADD, DIV, KINK_OPS, MAX, MIN, MUL, SUB, Tape, Var

_BINARY = frozenset({ADD, SUB, MUL, DIV, MAX, MIN})


@dataclass
class SlotCheck:
    slot: str
    analytic: float
    numeric: float
    rel_error: float
    kink: bool
    ok: bool


@dataclass
class GradCheckReport:
    checks: list[SlotCheck]
    tol: float
    step: float

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks if not c.kink), default=0.0)

    def flagged(self) -> list[str]:
        return [c.slot for c in self.checks if c.kink]

    def failures(self) -> list[SlotCheck]:
        return [c for c in self.checks if not c.ok]


def _kink_ancestors(tape: Tape, root: int) -> list[int]:
    seen = bytearray(root + 1)
    seen[root] = 1
    out = []
    for i in range(root, -1, -1):
        if not seen[i]:
            continue
        op = tape.op_code(i)
        if op <= 1:  # constant / input
            continue
        if op in KINK_OPS:
            out.append(i)
        a, b = tape.operands(i)
        seen[a] = 1
        if op in _BINARY:
            seen[b] = 1
    return out


def _branches(tape: Tape, vals, kinks: list[int]) -> list[int]:
    out = []
    for i in kinks:
        a, b = tape.operands(i)
        d = float(vals[a] - vals[b] if tape.op_code(i) in (MAX, MIN) else vals[a])
        out.append((d > 0) - (d < 0))
    return out


def grad_check(tape: Tape, root: Var | int, bindings: Mapping[str, float],
               step: float = 1e-6, tol: float = 1e-5) -> GradCheckReport:
    """Compare ``backward(root)`` with central differences for every slot.

    Relative error is ``|analytic - numeric| / max(1, |analytic|)``. A slot
    whose ±step perturbation moves any abs/max/min/relu node feeding the
    root onto or across its kink is flagged and not counted against ``tol``.
    The tape is left evaluated at ``bindings``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rid = root.id if isinstance(root, Var) else int(root)
    base = {k: float(v) for k, v in bindings.items()}
    kinks = _kink_ancestors(tape, rid)

    vals = tape.forward(base)
    ref = _branches(tape, vals, kinks)
    analytic = tape.backward(rid)

    checks = []
    for slot in tape.input_slots:
        shifted = dict(base)
        shifted[slot] = base[slot] + step
        vals = tape.forward(shifted)
        up, up_br = float(vals[rid]), _branches(tape, vals, kinks)
        shifted[slot] = base[slot] - step
        vals = tape.forward(shifted)
        down, down_br = float(vals[rid]), _branches(tape, vals, kinks)

        numeric = (up - down) / (2.0 * step)
        kink = not (ref == up_br == down_br) or 0 in ref
        g = analytic[slot]
        rel = abs(g - numeric) / max(1.0, abs(g))
        checks.append(SlotCheck(slot, g, numeric, rel, kink, kink or rel <= tol))

    tape.forward(base)
    return GradCheckReport(checks, tol, step)

"""Pure-Python tape sweeps.

Mirrors ``_kernel.pyx`` operation for operation so both backends produce
bit-identical values and adjoints.
"""

import math

CONST, INPUT, ADD, SUB, MUL, DIV, NEG, EXP, LOG, ABS, MAX, MIN, RELU, POWC = range(14)

OK, DIV_ZERO, LOG_DOMAIN, NON_FINITE = range(4)

DIV_EPS = 1e-12


def forward(ops, a, b, k, val, n):
    """Evaluate nodes ``0..n-1`` in place. Returns ``(status, node)``."""
    isfinite = math.isfinite
    for i in range(n):
        op = ops[i]
        if op == INPUT:
            v = val[i]
        elif op == CONST:
            v = k[i]
        elif op == ADD:
            v = val[a[i]] + val[b[i]]
        elif op == SUB:
            v = val[a[i]] - val[b[i]]
        elif op == MUL:
            v = val[a[i]] * val[b[i]]
        elif op == DIV:
            den = val[b[i]]
            if -DIV_EPS < den < DIV_EPS:
                return DIV_ZERO, i
            v = val[a[i]] / den
        elif op == NEG:
            v = -val[a[i]]
        elif op == EXP:
            try:
                v = math.exp(val[a[i]])
            except OverflowError:
                return NON_FINITE, i
        elif op == LOG:
            u = val[a[i]]
            if not u > 0.0:
                return LOG_DOMAIN, i
            v = math.log(u)
        elif op == ABS:
            v = math.fabs(val[a[i]])
        elif op == MAX:
            x, y = val[a[i]], val[b[i]]
            v = x if x >= y else y
        elif op == MIN:
            x, y = val[a[i]], val[b[i]]
            v = x if x <= y else y
        elif op == RELU:
            u = val[a[i]]
            v = u if u > 0.0 else 0.0
        elif op == POWC:
            try:
                v = math.pow(val[a[i]], k[i])
            except (ValueError, OverflowError):
                return NON_FINITE, i
        else:
            raise ValueError(f"unknown op code {op} at node {i}")
        if not isfinite(v):
            return NON_FINITE, i
        val[i] = v
    return OK, -1


def backward(ops, a, b, k, val, adj, root):
    """Accumulate adjoints of ``root`` into ``adj`` (zeroed here)."""
    for i in range(len(adj)):
        adj[i] = 0.0
    adj[root] = 1.0
    for i in range(root, -1, -1):
        g = adj[i]
        if g == 0.0:
            continue
        op = ops[i]
        if op == ADD:
            adj[a[i]] += g
            adj[b[i]] += g
        elif op == SUB:
            adj[a[i]] += g
            adj[b[i]] -= g
        elif op == MUL:
            ia, ib = a[i], b[i]
            adj[ia] += g * val[ib]
            adj[ib] += g * val[ia]
        elif op == DIV:
            ia, ib = a[i], b[i]
            den = val[ib]
            adj[ia] += g / den
            adj[ib] -= g * val[ia] / (den * den)
        elif op == NEG:
            adj[a[i]] -= g
        elif op == EXP:
            adj[a[i]] += g * val[i]
        elif op == LOG:
            adj[a[i]] += g / val[a[i]]
        elif op == ABS:
            u = val[a[i]]
            if u > 0.0:
                adj[a[i]] += g
            elif u < 0.0:
                adj[a[i]] -= g
        elif op == MAX:
            if val[a[i]] >= val[b[i]]:
                adj[a[i]] += g
            else:
                adj[b[i]] += g
        elif op == MIN:
            if val[a[i]] <= val[b[i]]:
                adj[a[i]] += g
            else:
                adj[b[i]] += g
        elif op == RELU:
            if val[a[i]] > 0.0:
                adj[a[i]] += g
        elif op == POWC:
            e = k[i]
            try:
                d = math.pow(val[a[i]], e - 1.0)
            except (ValueError, OverflowError):
                d = math.inf
            adj[a[i]] += g * e * d

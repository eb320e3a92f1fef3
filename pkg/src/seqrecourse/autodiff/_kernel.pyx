# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tape sweeps; same semantics as ``_kernel_py``."""

from libc.math cimport exp, log, fabs, pow, isfinite

cdef enum:
    CONST = 0
    INPUT = 1
    ADD = 2
    SUB = 3
    MUL = 4
    DIV = 5
    NEG = 6
    EXP = 7
    LOG = 8
    ABS = 9
    MAX = 10
    MIN = 11
    RELU = 12
    POWC = 13

cdef enum:
    OK = 0
    DIV_ZERO = 1
    LOG_DOMAIN = 2
    NON_FINITE = 3

cdef double DIV_EPS = 1e-12


def forward(const signed char[:] ops, const int[:] a, const int[:] b,
            const double[:] k, double[:] val, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef Py_ssize_t bad = -1
    cdef int status = OK
    cdef signed char op
    cdef double v, x, y
    with nogil:
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
                y = val[b[i]]
                if -DIV_EPS < y < DIV_EPS:
                    status = DIV_ZERO
                    bad = i
                    break
                v = val[a[i]] / y
            elif op == NEG:
                v = -val[a[i]]
            elif op == EXP:
                v = exp(val[a[i]])
            elif op == LOG:
                x = val[a[i]]
                if not x > 0.0:
                    status = LOG_DOMAIN
                    bad = i
                    break
                v = log(x)
            elif op == ABS:
                v = fabs(val[a[i]])
            elif op == MAX:
                x = val[a[i]]
                y = val[b[i]]
                v = x if x >= y else y
            elif op == MIN:
                x = val[a[i]]
                y = val[b[i]]
                v = x if x <= y else y
            elif op == RELU:
                x = val[a[i]]
                v = x if x > 0.0 else 0.0
            elif op == POWC:
                v = pow(val[a[i]], k[i])
            else:
                status = -1
                bad = i
                break
            if not isfinite(v):
                status = NON_FINITE
                bad = i
                break
            val[i] = v
    if status < 0:
        raise ValueError(f"unknown op code {ops[bad]} at node {bad}")
    return status, bad


def backward(const signed char[:] ops, const int[:] a, const int[:] b,
             const double[:] k, const double[:] val, double[:] adj, Py_ssize_t root):
    cdef Py_ssize_t i, ia, ib
    cdef signed char op
    cdef double g, u, e
    with nogil:
        for i in range(adj.shape[0]):
            adj[i] = 0.0
        adj[root] = 1.0
        for i in range(root, -1, -1):
            g = adj[i]
            if g == 0.0:
                continue
            op = ops[i]
            ia = a[i]
            ib = b[i]
            if op == ADD:
                adj[ia] += g
                adj[ib] += g
            elif op == SUB:
                adj[ia] += g
                adj[ib] -= g
            elif op == MUL:
                adj[ia] += g * val[ib]
                adj[ib] += g * val[ia]
            elif op == DIV:
                u = val[ib]
                adj[ia] += g / u
                adj[ib] -= g * val[ia] / (u * u)
            elif op == NEG:
                adj[ia] -= g
            elif op == EXP:
                adj[ia] += g * val[i]
            elif op == LOG:
                adj[ia] += g / val[ia]
            elif op == ABS:
                u = val[ia]
                if u > 0.0:
                    adj[ia] += g
                elif u < 0.0:
                    adj[ia] -= g
            elif op == MAX:
                if val[ia] >= val[ib]:
                    adj[ia] += g
                else:
                    adj[ib] += g
            elif op == MIN:
                if val[ia] <= val[ib]:
                    adj[ia] += g
                else:
                    adj[ib] += g
            elif op == RELU:
                if val[ia] > 0.0:
                    adj[ia] += g
            elif op == POWC:
                e = k[i]
                adj[ia] += g * e * pow(val[ia], e - 1.0)

"""Pure-Python next-reaction kernel.

Reference implementation of the compiled kernel in ``_ssa_kernel.pyx``.
Both consume exponential variates in the same order, in chunks of
``CHUNK``, so a given generator state yields the same trajectory from
either.
"""

import math

import numpy as np

CHUNK = 512
INF = math.inf

STATUS_DONE = 0
STATUS_STALLED = 1
STATUS_MAX_EVENTS = 2

# opcodes, see network.py
_CONST, _LOAD, _ADD, _SUB, _MUL, _DIV, _POW, _NEG = range(8)
_EXP, _LOG, _SQRT, _ABS, _MIN, _MAX = range(8, 14)


class KernelRateError(ArithmeticError):
    def __init__(self, reaction, reason):
        self.reaction = reaction
        self.reason = reason
        super().__init__(reason)


def _propensity(j, x, ops, args, start, gptr, gsp, gk, stack):
    for g in range(gptr[j], gptr[j + 1]):
        if x[gsp[g]] < gk[g]:
            return 0.0, False
    sp = 0
    for pc in range(start[j], start[j + 1]):
        op = ops[pc]
        if op == _CONST:
            stack[sp] = args[pc]
            sp += 1
        elif op == _LOAD:
            stack[sp] = float(x[int(args[pc])])
            sp += 1
        elif op == _NEG:
            stack[sp - 1] = -stack[sp - 1]
        elif op >= _EXP and op <= _ABS:
            v = stack[sp - 1]
            try:
                if op == _EXP:
                    v = math.exp(v)
                elif op == _LOG:
                    v = math.log(v) if v > 0 else (-INF if v == 0 else math.nan)
                elif op == _SQRT:
                    v = math.sqrt(v) if v >= 0 else math.nan
                else:
                    v = abs(v)
            except OverflowError:
                v = INF
            stack[sp - 1] = v
        else:
            b = stack[sp - 1]
            a = stack[sp - 2]
            sp -= 1
            if op == _ADD:
                v = a + b
            elif op == _SUB:
                v = a - b
            elif op == _MUL:
                v = a * b
            elif op == _DIV:
                if b == 0.0:
                    raise KernelRateError(j, "division by zero")
                v = a / b
            elif op == _POW:
                try:
                    v = a ** b
                except (OverflowError, ZeroDivisionError):
                    v = INF
                if isinstance(v, complex):
                    v = math.nan
            elif op == _MIN:
                v = a if a < b else b
            else:
                v = a if a > b else b
            stack[sp - 1] = v
    v = stack[sp - 1]
    if not math.isfinite(v):
        raise KernelRateError(j, f"non-finite value {v}")
    if v < 0.0:
        return 0.0, True
    return v, False


def _less(T, i, j):
    return T[i] < T[j] or (T[i] == T[j] and i < j)


def _sift_up(heap, pos, T, k):
    r = heap[k]
    while k > 0:
        parent = (k - 1) >> 1
        q = heap[parent]
        if _less(T, r, q):
            heap[k] = q
            pos[q] = k
            k = parent
        else:
            break
    heap[k] = r
    pos[r] = k


def _sift_down(heap, pos, T, k):
    n = len(heap)
    r = heap[k]
    while True:
        c = 2 * k + 1
        if c >= n:
            break
        if c + 1 < n and _less(T, heap[c + 1], heap[c]):
            c += 1
        q = heap[c]
        if _less(T, q, r):
            heap[k] = q
            pos[q] = k
            k = c
        else:
            break
    heap[k] = r
    pos[r] = k


def simulate(initial, ops, args, start, max_stack, gptr, gsp, gk, cptr, csp, cd,
             dptr, didx, t_end, grid, rng, record, max_events):
    """Run one trajectory; see ``ssa.simulate`` for the meaning of the result."""
    n_r = len(start) - 1
    x = [int(v) for v in initial]
    ops = [int(v) for v in ops]
    args = [float(v) for v in args]
    start = [int(v) for v in start]
    gptr, gsp, gk = list(map(int, gptr)), list(map(int, gsp)), list(map(int, gk))
    cptr, csp, cd = list(map(int, cptr)), list(map(int, csp)), list(map(int, cd))
    dptr, didx = list(map(int, dptr)), list(map(int, didx))
    grid = [float(g) for g in grid]
    stack = [0.0] * max(1, max_stack)

    buf = []
    bi = 0
    clamped = 0

    def exp1():
        nonlocal buf, bi
        if bi == len(buf):
            buf = rng.standard_exponential(CHUNK).tolist()
            bi = 0
        v = buf[bi]
        bi += 1
        return v

    def prop(j):
        nonlocal clamped
        v, c = _propensity(j, x, ops, args, start, gptr, gsp, gk, stack)
        if c:
            clamped += 1
        return v

    a = [0.0] * n_r
    T = [INF] * n_r
    for j in range(n_r):
        a[j] = prop(j)
        if a[j] > 0.0:
            T[j] = exp1() / a[j]
    heap = list(range(n_r))
    pos = list(range(n_r))
    for k in range(n_r // 2 - 1, -1, -1):
        _sift_down(heap, pos, T, k)

    n_grid = len(grid)
    samples = np.zeros((n_grid, len(x)), dtype=np.int64)
    gi = 0
    counts = [0] * n_r
    times = []
    fired = []
    t = 0.0
    n_events = 0
    status = STATUS_DONE
    while True:
        if n_r == 0:
            status = STATUS_STALLED
            break
        j = heap[0]
        tj = T[j]
        if tj == INF:
            status = STATUS_STALLED
            break
        if tj > t_end:
            break
        if n_events >= max_events:
            status = STATUS_MAX_EVENTS
            break
        assert tj >= t, "event queue out of order"
        while gi < n_grid and grid[gi] < tj:
            samples[gi, :] = x
            gi += 1
        t = tj
        for c in range(cptr[j], cptr[j + 1]):
            x[csp[c]] += cd[c]
            if x[csp[c]] < 0:
                raise AssertionError("negative count")
        counts[j] += 1
        n_events += 1
        if record:
            times.append(t)
            fired.append(j)
        a_new = prop(j)
        a[j] = a_new
        T[j] = t + exp1() / a_new if a_new > 0.0 else INF
        k = pos[j]
        _sift_up(heap, pos, T, k)
        _sift_down(heap, pos, T, pos[j])
        for e in range(dptr[j], dptr[j + 1]):
            d = didx[e]
            if d == j:
                continue
            a_new = prop(d)
            a_old = a[d]
            if a_new > 0.0:
                if a_old > 0.0:
                    T[d] = t + (a_old / a_new) * (T[d] - t)
                else:
                    T[d] = t + exp1() / a_new
            else:
                T[d] = INF
            a[d] = a_new
            _sift_up(heap, pos, T, pos[d])
            _sift_down(heap, pos, T, pos[d])
    while gi < n_grid:
        samples[gi, :] = x
        gi += 1
    return (np.asarray(times, dtype=np.float64), np.asarray(fired, dtype=np.int32), samples,
            np.asarray(counts, dtype=np.int64), np.asarray(x, dtype=np.int64), t, status, clamped)

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled next-reaction kernel.

Mirrors ``_ssa_py.simulate`` operation for operation, including the
order in which exponential variates are drawn, so results are identical.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, fabs, pow, isfinite, INFINITY, NAN

from ._ssa_py import CHUNK, KernelRateError, STATUS_DONE, STATUS_STALLED, STATUS_MAX_EVENTS

cnp.import_array()

DEF OP_CONST = 0
DEF OP_LOAD = 1
DEF OP_ADD = 2
DEF OP_SUB = 3
DEF OP_MUL = 4
DEF OP_DIV = 5
DEF OP_POW = 6
DEF OP_NEG = 7
DEF OP_EXP = 8
DEF OP_LOG = 9
DEF OP_SQRT = 10
DEF OP_ABS = 11
DEF OP_MIN = 12
DEF OP_MAX = 13


cdef class _Rates:
    cdef int[::1] ops
    cdef double[::1] args
    cdef int[::1] start
    cdef int[::1] gptr
    cdef int[::1] gsp
    cdef long long[::1] gk
    cdef double[::1] stack
    cdef public long clamped
    cdef public int err_reaction
    cdef public int err_code  # 0 ok, 1 division by zero, 2 non-finite
    cdef public double err_value

    def __init__(self, ops, args, start, max_stack, gptr, gsp, gk):
        self.ops = np.ascontiguousarray(ops, dtype=np.int32)
        self.args = np.ascontiguousarray(args, dtype=np.float64)
        self.start = np.ascontiguousarray(start, dtype=np.int32)
        self.gptr = np.ascontiguousarray(gptr, dtype=np.int32)
        self.gsp = np.ascontiguousarray(gsp, dtype=np.int32)
        self.gk = np.ascontiguousarray(gk, dtype=np.int64)
        self.stack = np.zeros(max(1, max_stack), dtype=np.float64)
        self.clamped = 0
        self.err_code = 0

    cdef double eval(self, int j, long long[::1] x) noexcept nogil:
        cdef int g, pc, op
        cdef int sp = 0
        cdef double a, b, v
        for g in range(self.gptr[j], self.gptr[j + 1]):
            if x[self.gsp[g]] < self.gk[g]:
                return 0.0
        for pc in range(self.start[j], self.start[j + 1]):
            op = self.ops[pc]
            if op == OP_CONST:
                self.stack[sp] = self.args[pc]
                sp += 1
            elif op == OP_LOAD:
                self.stack[sp] = <double> x[<int> self.args[pc]]
                sp += 1
            elif op == OP_NEG:
                self.stack[sp - 1] = -self.stack[sp - 1]
            elif op == OP_EXP:
                self.stack[sp - 1] = exp(self.stack[sp - 1])
            elif op == OP_LOG:
                v = self.stack[sp - 1]
                if v > 0:
                    self.stack[sp - 1] = log(v)
                elif v == 0:
                    self.stack[sp - 1] = -INFINITY
                else:
                    self.stack[sp - 1] = NAN
            elif op == OP_SQRT:
                v = self.stack[sp - 1]
                self.stack[sp - 1] = sqrt(v) if v >= 0 else NAN
            elif op == OP_ABS:
                self.stack[sp - 1] = fabs(self.stack[sp - 1])
            else:
                b = self.stack[sp - 1]
                a = self.stack[sp - 2]
                sp -= 1
                if op == OP_ADD:
                    v = a + b
                elif op == OP_SUB:
                    v = a - b
                elif op == OP_MUL:
                    v = a * b
                elif op == OP_DIV:
                    if b == 0.0:
                        self.err_code = 1
                        self.err_reaction = j
                        return 0.0
                    v = a / b
                elif op == OP_POW:
                    v = pow(a, b)
                elif op == OP_MIN:
                    v = a if a < b else b
                else:
                    v = a if a > b else b
                self.stack[sp - 1] = v
        v = self.stack[sp - 1]
        if not isfinite(v):
            self.err_code = 2
            self.err_reaction = j
            self.err_value = v
            return 0.0
        if v < 0.0:
            self.clamped += 1
            return 0.0
        return v


cdef inline bint _less(double[::1] T, int i, int j) noexcept nogil:
    return T[i] < T[j] or (T[i] == T[j] and i < j)


cdef void _sift_up(int[::1] heap, int[::1] pos, double[::1] T, int k) noexcept nogil:
    cdef int r = heap[k]
    cdef int parent, q
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


cdef void _sift_down(int[::1] heap, int[::1] pos, double[::1] T, int k, int n) noexcept nogil:
    cdef int r = heap[k]
    cdef int c, q
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


cdef class _Exp:
    cdef object rng
    cdef double[::1] buf
    cdef Py_ssize_t bi

    def __init__(self, rng):
        self.rng = rng
        self.buf = np.empty(0, dtype=np.float64)
        self.bi = 0

    cdef double next(self):
        if self.bi == self.buf.shape[0]:
            self.buf = np.ascontiguousarray(self.rng.standard_exponential(CHUNK), dtype=np.float64)
            self.bi = 0
        self.bi += 1
        return self.buf[self.bi - 1]


def _raise(_Rates rates):
    if rates.err_code == 1:
        raise KernelRateError(rates.err_reaction, "division by zero")
    raise KernelRateError(rates.err_reaction, f"non-finite value {rates.err_value}")


def simulate(initial, ops, args, start, max_stack, gptr, gsp, gk, cptr, csp, cd,
             dptr, didx, double t_end, grid, rng, bint record, long long max_events):
    cdef _Rates rates = _Rates(ops, args, start, max_stack, gptr, gsp, gk)
    cdef _Exp draws = _Exp(rng)
    cdef long long[::1] x = np.array(initial, dtype=np.int64)
    cdef int[::1] cptr_v = np.ascontiguousarray(cptr, dtype=np.int32)
    cdef int[::1] csp_v = np.ascontiguousarray(csp, dtype=np.int32)
    cdef long long[::1] cd_v = np.ascontiguousarray(cd, dtype=np.int64)
    cdef int[::1] dptr_v = np.ascontiguousarray(dptr, dtype=np.int32)
    cdef int[::1] didx_v = np.ascontiguousarray(didx, dtype=np.int32)
    cdef double[::1] grid_v = np.ascontiguousarray(grid, dtype=np.float64)
    cdef int n_r = len(start) - 1
    cdef int n_s = x.shape[0]
    cdef Py_ssize_t n_grid = grid_v.shape[0]
    cdef double[::1] a = np.zeros(n_r, dtype=np.float64)
    cdef double[::1] T = np.full(n_r, INFINITY, dtype=np.float64)
    cdef int[::1] heap = np.arange(n_r, dtype=np.int32)
    cdef int[::1] pos = np.arange(n_r, dtype=np.int32)
    cdef long long[:, ::1] samples = np.zeros((n_grid, n_s), dtype=np.int64)
    cdef long long[::1] counts = np.zeros(n_r, dtype=np.int64)
    cdef Py_ssize_t cap = 1024 if record else 0
    cdef cnp.ndarray times_arr = np.empty(cap, dtype=np.float64)
    cdef cnp.ndarray fired_arr = np.empty(cap, dtype=np.int32)
    cdef double[::1] times = times_arr
    cdef int[::1] fired = fired_arr
    cdef Py_ssize_t gi = 0
    cdef long long n_events = 0
    cdef double t = 0.0
    cdef double tj, a_new, a_old
    cdef int j, k, c, e, d, s
    cdef int status = STATUS_DONE

    for j in range(n_r):
        a[j] = rates.eval(j, x)
        if rates.err_code:
            _raise(rates)
        if a[j] > 0.0:
            T[j] = draws.next() / a[j]
    for k in range(n_r // 2 - 1, -1, -1):
        _sift_down(heap, pos, T, k, n_r)

    while True:
        if n_r == 0:
            status = STATUS_STALLED
            break
        j = heap[0]
        tj = T[j]
        if tj == INFINITY:
            status = STATUS_STALLED
            break
        if tj > t_end:
            break
        if n_events >= max_events:
            status = STATUS_MAX_EVENTS
            break
        if tj < t:
            raise AssertionError("event queue out of order")
        while gi < n_grid and grid_v[gi] < tj:
            for s in range(n_s):
                samples[gi, s] = x[s]
            gi += 1
        t = tj
        for c in range(cptr_v[j], cptr_v[j + 1]):
            x[csp_v[c]] += cd_v[c]
            if x[csp_v[c]] < 0:
                raise AssertionError("negative count")
        counts[j] += 1
        if record:
            if n_events == cap:
                cap *= 2
                times_arr = np.resize(times_arr, cap)
                fired_arr = np.resize(fired_arr, cap)
                times = times_arr
                fired = fired_arr
            times[n_events] = t
            fired[n_events] = j
        n_events += 1
        a_new = rates.eval(j, x)
        if rates.err_code:
            _raise(rates)
        a[j] = a_new
        if a_new > 0.0:
            T[j] = t + draws.next() / a_new
        else:
            T[j] = INFINITY
        _sift_up(heap, pos, T, pos[j])
        _sift_down(heap, pos, T, pos[j], n_r)
        for e in range(dptr_v[j], dptr_v[j + 1]):
            d = didx_v[e]
            if d == j:
                continue
            a_new = rates.eval(d, x)
            if rates.err_code:
                _raise(rates)
            a_old = a[d]
            if a_new > 0.0:
                if a_old > 0.0:
                    T[d] = t + (a_old / a_new) * (T[d] - t)
                else:
                    T[d] = t + draws.next() / a_new
            else:
                T[d] = INFINITY
            a[d] = a_new
            _sift_up(heap, pos, T, pos[d])
            _sift_down(heap, pos, T, pos[d], n_r)
    while gi < n_grid:
        for s in range(n_s):
            samples[gi, s] = x[s]
        gi += 1
    if record:
        out_times = times_arr[:n_events].copy()
        out_fired = fired_arr[:n_events].copy()
    else:
        out_times = np.empty(0, dtype=np.float64)
        out_fired = np.empty(0, dtype=np.int32)
    return (out_times, out_fired, np.asarray(samples), np.asarray(counts), np.asarray(x), t, status,
            rates.clamped)

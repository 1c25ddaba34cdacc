# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GEMM inner loops.

Operands arrive already laid out by ``wrapnet.kernels.layout``: plain
integer matrices for the scalar paths, packed uint64 words plus weight
masks for the SWAR paths.  Every output entry is produced by exactly one
iteration of the outer ``prange`` loop, so results do not depend on the
thread count.
"""
import numpy as np
from cython.parallel cimport prange
from libc.stdint cimport int8_t, int32_t, int64_t, uint32_t, uint64_t

ctypedef fused narrow_int:
    int8_t
    int32_t

NAME = "cython"


def gemm_exact(const int64_t[:, ::1] A, const int64_t[:, ::1] Bt, int threads=1):
    cdef Py_ssize_t M = A.shape[0], K = A.shape[1], N = Bt.shape[0]
    cdef Py_ssize_t m, n, k
    cdef int64_t acc
    out = np.empty((M, N), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    for m in prange(M, nogil=True, num_threads=threads, schedule="static"):
        for n in range(N):
            acc = 0
            for k in range(K):
                acc = acc + A[m, k] * Bt[n, k]
            o[m, n] = acc
    return out


def gemm_wrap32(const narrow_int[:, ::1] A, const narrow_int[:, ::1] Bt, int threads=1):
    """Scalar loop with a 32-bit accumulator that wraps (uint32 arithmetic)."""
    cdef Py_ssize_t M = A.shape[0], K = A.shape[1], N = Bt.shape[0]
    cdef Py_ssize_t m, n, k
    cdef uint32_t acc
    out = np.empty((M, N), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    for m in prange(M, nogil=True, num_threads=threads, schedule="static"):
        for n in range(N):
            acc = 0
            for k in range(K):
                acc = acc + <uint32_t>(<int32_t>A[m, k]) * <uint32_t>(<int32_t>Bt[n, k])
            o[m, n] = <int32_t>acc
    return out


cdef inline int64_t _finish(uint64_t acc, int lanes, int lane_shift, uint64_t lane_mask,
                            int64_t bias, int vbits) noexcept nogil:
    # sum lanes plus the two's-complement correction, wrap to signed vbits
    cdef int64_t s = bias
    cdef int l
    for l in range(lanes):
        s = s + <int64_t>((acc >> (l * lane_shift)) & lane_mask)
    s = s & ((<int64_t>1 << vbits) - 1)
    if s >= (<int64_t>1 << (vbits - 1)):
        s = s - (<int64_t>1 << vbits)
    return s


def gemm_packed_isolated(const uint64_t[:, ::1] Ap, const uint64_t[:, ::1] neg,
                         const uint64_t[:, ::1] nz, const int64_t[::1] negcount,
                         int lane_bits, int lanes, uint64_t low, uint64_t high,
                         int threads=1):
    cdef Py_ssize_t M = Ap.shape[0], Kw = Ap.shape[1], N = neg.shape[0]
    cdef Py_ssize_t m, n, j
    cdef uint64_t acc, p
    cdef uint64_t lane_mask = (<uint64_t>1 << lane_bits) - 1
    cdef uint64_t used = low | high
    out = np.empty((M, N), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    dense_arr = np.ascontiguousarray((np.asarray(nz) == used).all(axis=1), dtype=np.uint8)
    cdef const unsigned char[::1] dense = dense_arr
    for m in prange(M, nogil=True, num_threads=threads, schedule="static"):
        for n in range(N):
            acc = 0
            if dense[n]:
                # no zero weights: the nz mask is all ones
                for j in range(Kw):
                    p = Ap[m, j] ^ neg[n, j]
                    acc = ((acc & low) + (p & low)) ^ ((acc ^ p) & high)
            else:
                for j in range(Kw):
                    p = (Ap[m, j] ^ neg[n, j]) & nz[n, j]
                    acc = ((acc & low) + (p & low)) ^ ((acc ^ p) & high)
            o[m, n] = _finish(acc, lanes, lane_bits, lane_mask, negcount[n], lane_bits)
    return out


def gemm_packed_buffered(const uint64_t[:, ::1] Ap, const uint64_t[:, ::1] neg,
                         const uint64_t[:, ::1] nz, const int64_t[::1] negcount,
                         int lane_bits, int lanes, uint64_t value_mask, int threads=1):
    cdef Py_ssize_t M = Ap.shape[0], Kw = Ap.shape[1], N = neg.shape[0]
    cdef Py_ssize_t m, n, j
    cdef uint64_t acc
    cdef uint64_t lane_mask = (<uint64_t>1 << (lane_bits - 1)) - 1
    out = np.empty((M, N), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    for m in prange(M, nogil=True, num_threads=threads, schedule="static"):
        for n in range(N):
            acc = 0
            for j in range(Kw):
                acc = (acc + ((Ap[m, j] ^ neg[n, j]) & nz[n, j])) & value_mask
            o[m, n] = _finish(acc, lanes, lane_bits, lane_mask, negcount[n], lane_bits - 1)
    return out


def gemm_packed_contaminated(const uint64_t[:, ::1] Ap, const uint64_t[:, ::1] neg,
                             const uint64_t[:, ::1] nz, const uint64_t[:, ::1] ones,
                             int lane_bits, int lanes, uint64_t low, uint64_t high,
                             int threads=1):
    """Plain wide adds; returns (result, top-lane drops, reduction drops)."""
    cdef Py_ssize_t M = Ap.shape[0], Kw = Ap.shape[1], N = neg.shape[0]
    cdef Py_ssize_t m, n, j
    cdef int l
    cdef uint64_t acc, p, s, q
    cdef int used_bits = lanes * lane_bits
    cdef uint64_t used = high | low
    cdef uint64_t lane_mask = (<uint64_t>1 << lane_bits) - 1
    cdef int64_t top, red, r
    out = np.empty((M, N), dtype=np.int64)
    tops = np.empty((M, N), dtype=np.int64)
    reds = np.empty((M, N), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    cdef int64_t[:, ::1] ot = tops
    cdef int64_t[:, ::1] orr = reds
    for m in prange(M, nogil=True, num_threads=threads, schedule="static"):
        for n in range(N):
            acc = 0
            top = 0
            for j in range(Kw):
                # per-lane negation: (~a within the lane) + 1, lane-isolated
                q = (Ap[m, j] ^ neg[n, j]) & nz[n, j]
                p = ((q & low) + (ones[n, j] & low)) ^ ((q ^ ones[n, j]) & high)
                s = acc + p
                if used_bits == 64:
                    top = top + (s < acc)
                    acc = s
                else:
                    top = top + <int64_t>(s >> used_bits)
                    acc = s & used
            r = 0
            red = 0
            for l in range(lanes):
                r = r + <int64_t>((acc >> (l * lane_bits)) & lane_mask)
                red = red + (r >> lane_bits)
                r = r & <int64_t>lane_mask
            if r >= (<int64_t>1 << (lane_bits - 1)):
                r = r - (<int64_t>1 << lane_bits)
            o[m, n] = r
            ot[m, n] = top
            orr[m, n] = red
    return out, tops, reds


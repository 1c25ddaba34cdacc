"""Numpy implementations of the GEMM kernels, used when the extension is absent.

Same signatures and bit-exact results as ``_ckernels``.  The packed paths
stay SWAR: words are combined with the same mask arithmetic, but the
K-reduction is done as a pairwise tree (every lane-wise add here is
associative) rather than a sequential loop.
"""
import numpy as np

NAME = "numpy"

_ROW_BLOCK = 64
_U64 = np.uint64


def gemm_exact(A, Bt, threads=1):
    return np.asarray(A, dtype=np.int64) @ np.asarray(Bt, dtype=np.int64).T


def gemm_wrap32(A, Bt, threads=1):
    out = np.asarray(A, dtype=np.int64) @ np.asarray(Bt, dtype=np.int64).T
    return (out & 0xFFFFFFFF).astype(np.uint32).view(np.int32)


def _tree(words, combine):
    # reduce axis -1 pairwise; odd leftovers are carried to the next round
    while words.shape[-1] > 1:
        n = words.shape[-1]
        half = n // 2
        merged = combine(words[..., :half], words[..., half:2 * half])
        if n % 2:
            merged = np.concatenate([merged, words[..., -1:]], axis=-1)
        words = merged
    return words[..., 0]


def _lane_sum(acc, lanes, lane_bits, lane_mask):
    s = np.zeros(acc.shape, dtype=np.int64)
    for lane in range(lanes):
        s += ((acc >> _U64(lane * lane_bits)) & _U64(lane_mask)).astype(np.int64)
    return s


def _signed(s, vbits):
    s = s & ((1 << vbits) - 1)
    return np.where(s >= (1 << (vbits - 1)), s - (1 << vbits), s)


def _selected(Ap, neg, nz, rows):
    return (Ap[rows, None, :] ^ neg[None, :, :]) & nz[None, :, :]


def gemm_packed_isolated(Ap, neg, nz, negcount, lane_bits, lanes, low, high, threads=1):
    low, high = _U64(low), _U64(high)
    M = Ap.shape[0]
    out = np.empty((M, neg.shape[0]), dtype=np.int64)

    def iso_add(a, c):
        return ((a & low) + (c & low)) ^ ((a ^ c) & high)

    for r0 in range(0, M, _ROW_BLOCK):
        rows = slice(r0, min(M, r0 + _ROW_BLOCK))
        acc = _tree(_selected(Ap, neg, nz, rows), iso_add)
        s = _lane_sum(acc, lanes, lane_bits, (1 << lane_bits) - 1) + negcount[None, :]
        out[rows] = _signed(s, lane_bits)
    return out


def gemm_packed_buffered(Ap, neg, nz, negcount, lane_bits, lanes, value_mask, threads=1):
    vm = _U64(value_mask)
    M = Ap.shape[0]
    out = np.empty((M, neg.shape[0]), dtype=np.int64)
    for r0 in range(0, M, _ROW_BLOCK):
        rows = slice(r0, min(M, r0 + _ROW_BLOCK))
        acc = _tree(_selected(Ap, neg, nz, rows), lambda a, c: (a + c) & vm)
        s = _lane_sum(acc, lanes, lane_bits, (1 << (lane_bits - 1)) - 1) + negcount[None, :]
        out[rows] = _signed(s, lane_bits - 1)
    return out


def gemm_packed_contaminated(Ap, neg, nz, ones, lane_bits, lanes, low, high, threads=1):
    low, high = _U64(low), _U64(high)
    used_bits = lanes * lane_bits
    lane_mask = (1 << lane_bits) - 1
    M, N = Ap.shape[0], neg.shape[0]
    out = np.empty((M, N), dtype=np.int64)
    tops = np.empty((M, N), dtype=np.int64)
    reds = np.empty((M, N), dtype=np.int64)
    for r0 in range(0, M, _ROW_BLOCK):
        rows = slice(r0, min(M, r0 + _ROW_BLOCK))
        q = _selected(Ap, neg, nz, rows)
        o = ones[None, :, :]
        p = ((q & low) + (o & low)) ^ ((q ^ o) & high)
        # sequential wide adds modulo 2**used_bits drop exactly floor(total / 2**used_bits)
        lo = (p & _U64(0xFFFFFFFF)).sum(axis=-1, dtype=np.uint64)
        hi = (p >> _U64(32)).sum(axis=-1, dtype=np.uint64)
        t_hi = hi + (lo >> _U64(32))
        t_lo = lo & _U64(0xFFFFFFFF)
        if used_bits >= 32:
            sh = _U64(used_bits - 32)
            top = t_hi >> sh
            acc = (((t_hi & ((_U64(1) << sh) - _U64(1))) << _U64(32)) | t_lo)
        else:
            total = (t_hi << _U64(32)) | t_lo
            top = total >> _U64(used_bits)
            acc = total & ((_U64(1) << _U64(used_bits)) - _U64(1))
        s = _lane_sum(acc, lanes, lane_bits, lane_mask)
        out[rows] = _signed(s, lane_bits)
        tops[rows] = top.astype(np.int64)
        reds[rows] = s >> lane_bits
    return out, tops, reds

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the quantization and packing kernels (see _pykernels)."""

import numpy as np

from libc.math cimport round as c_round
from libc.stdint cimport int64_t, uint8_t, uint64_t

BACKEND = "cython"


def quantize_codes(const double[:, ::1] w, const double[::1] scales,
                   const int64_t[::1] zero_offsets, int64_t levels):
    cdef Py_ssize_t C = w.shape[0], N = w.shape[1], i, j
    cdef double s, z, v, top = <double>(levels - 1)
    out = np.empty((C, N), dtype=np.int64)
    cdef int64_t[:, ::1] o = out
    for i in range(C):
        s = scales[i]
        z = <double>zero_offsets[i]
        for j in range(N):
            v = c_round(w[i, j] / s) + z
            if v < 0.0:
                v = 0.0
            elif v > top:
                v = top
            o[i, j] = <int64_t>v
    return out


def ste_grads(const double[:, ::1] grad, const double[:, ::1] w, const double[::1] scales,
              const int64_t[::1] zero_offsets, int64_t levels):
    cdef Py_ssize_t C = w.shape[0], N = w.shape[1], i, j
    cdef double s, z, r, v, acc, top = <double>(levels - 1)
    gw = np.empty((C, N), dtype=np.float64)
    gs = np.empty(C, dtype=np.float64)
    cdef double[:, ::1] gwv = gw
    cdef double[::1] gsv = gs
    for i in range(C):
        s = scales[i]
        z = <double>zero_offsets[i]
        acc = 0.0
        for j in range(N):
            r = w[i, j] / s
            v = r + z
            if v < 0.0:
                gwv[i, j] = 0.0
                acc += grad[i, j] * (-z)
            elif v > top:
                gwv[i, j] = 0.0
                acc += grad[i, j] * (top - z)
            else:
                gwv[i, j] = grad[i, j]
                acc += grad[i, j] * (c_round(r) - r)
        gsv[i] = acc
    return gw, gs


def pack_groups(const int64_t[::1] codes, uint64_t levels, Py_ssize_t group, int width):
    cdef Py_ssize_t n = codes.shape[0]
    cdef Py_ssize_t n_groups = (n + group - 1) // group
    cdef Py_ssize_t nbytes = (n_groups * width + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    cdef uint8_t[::1] o = out
    cdef Py_ssize_t g, k, idx, bitpos, byte_idx
    cdef uint64_t word
    cdef int remaining, off, take
    for g in range(n_groups):
        word = 0
        for k in range(group - 1, -1, -1):
            idx = g * group + k
            word = word * levels
            if idx < n:
                word += <uint64_t>codes[idx]
        bitpos = g * width
        remaining = width
        while remaining > 0:
            byte_idx = bitpos >> 3
            off = bitpos & 7
            take = 8 - off
            if take > remaining:
                take = remaining
            o[byte_idx] |= <uint8_t>((word & ((<uint64_t>1 << take) - 1)) << off)
            word >>= take
            bitpos += take
            remaining -= take
    return out.tobytes()


def unpack_groups(const uint8_t[::1] data, Py_ssize_t n, uint64_t levels, Py_ssize_t group, int width):
    cdef Py_ssize_t n_groups = (n + group - 1) // group
    out = np.empty(n_groups * group, dtype=np.int64)
    cdef int64_t[::1] o = out
    cdef Py_ssize_t g, k, bitpos, byte_idx
    cdef uint64_t word, chunk
    cdef int got, off, take
    cdef bint ok = True
    for g in range(n_groups):
        word = 0
        bitpos = g * width
        got = 0
        while got < width:
            byte_idx = bitpos >> 3
            off = bitpos & 7
            take = 8 - off
            if take > width - got:
                take = width - got
            chunk = (data[byte_idx] >> off) & ((1 << take) - 1)
            word |= chunk << got
            got += take
            bitpos += take
        for k in range(group):
            o[g * group + k] = <int64_t>(word % levels)
            word //= levels
        if word != 0:
            ok = False
    return out[:n], ok

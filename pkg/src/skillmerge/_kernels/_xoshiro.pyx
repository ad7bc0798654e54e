# cython: boundscheck=False, wraparound=False, language_level=3
"""Compiled xoshiro256** kernel. Must stay bit-identical to xoshiro_py.py."""

import numpy as np

cimport cython
from libc.stdint cimport uint64_t

BACKEND = "compiled"

cdef uint64_t _SPLITMIX_GAMMA = 0x9E3779B97F4A7C15u


cdef inline uint64_t _rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))


cdef inline uint64_t _splitmix_out(uint64_t x) nogil:
    cdef uint64_t z = x
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9u
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBu
    return z ^ (z >> 31)


def splitmix64_next(x):
    cdef uint64_t xs = <uint64_t> (x & 0xFFFFFFFFFFFFFFFF)
    xs = xs + _SPLITMIX_GAMMA
    return int(xs), int(_splitmix_out(xs))


def seed_state(seed):
    cdef uint64_t x = <uint64_t> (seed & 0xFFFFFFFFFFFFFFFF)
    out = np.empty(4, dtype=np.uint64)
    cdef uint64_t[::1] view = out
    cdef int i
    for i in range(4):
        x = x + _SPLITMIX_GAMMA
        view[i] = _splitmix_out(x)
    return out


def fill_raw(state, out):
    cdef uint64_t[::1] s = state
    cdef uint64_t[::1] o = out
    cdef uint64_t s0 = s[0], s1 = s[1], s2 = s[2], s3 = s[3], t
    cdef Py_ssize_t i, n = o.shape[0]
    with nogil:
        for i in range(n):
            o[i] = _rotl(s1 * 5u, 7) * 9u
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3


def fill_uniform(state, out):
    cdef uint64_t[::1] s = state
    cdef double[::1] o = out
    cdef uint64_t s0 = s[0], s1 = s[1], s2 = s[2], s3 = s[3], t, r
    cdef double scale = 2.0 ** -53
    cdef Py_ssize_t i, n = o.shape[0]
    with nogil:
        for i in range(n):
            r = _rotl(s1 * 5u, 7) * 9u
            o[i] = <double> (r >> 11) * scale
            t = s1 << 17
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = _rotl(s3, 45)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: midstate nonce scanning and private-chain race resolution."""

from libc.math cimport log
from libc.string cimport memcmp, memcpy

import numpy as np

cdef extern from "openssl/sha.h" nogil:
    ctypedef struct SHA256_CTX:
        pass
    int SHA256_Init(SHA256_CTX *c)
    int SHA256_Update(SHA256_CTX *c, const void *data, size_t n)
    int SHA256_Final(unsigned char *md, SHA256_CTX *c)

cdef unsigned long long NONCE_LIMIT = 1ULL << 32


def scan_nonces(bytes prefix, long long start, long long count, bytes target):
    if len(prefix) != 76 or len(target) != 32:
        raise ValueError("prefix must be 76 bytes and target 32 bytes")
    if start < 0 or count < 0 or <unsigned long long>(start + count) > NONCE_LIMIT:
        raise ValueError("nonce range exceeds 32 bits")
    cdef const unsigned char *pre = prefix
    cdef const unsigned char *tgt = target
    cdef SHA256_CTX mid, work
    cdef unsigned char tail[16]
    cdef unsigned char first[32]
    cdef unsigned char second[32]
    cdef long long i, n = count
    cdef long long found = -1
    cdef unsigned int nonce
    memcpy(tail, pre + 64, 12)
    with nogil:
        SHA256_Init(&mid)
        SHA256_Update(&mid, pre, 64)
        for i in range(n):
            nonce = <unsigned int>(start + i)
            tail[12] = nonce & 0xFF
            tail[13] = (nonce >> 8) & 0xFF
            tail[14] = (nonce >> 16) & 0xFF
            tail[15] = (nonce >> 24) & 0xFF
            work = mid
            SHA256_Update(&work, tail, 16)
            SHA256_Final(first, &work)
            SHA256_Init(&work)
            SHA256_Update(&work, first, 32)
            SHA256_Final(second, &work)
            if memcmp(second, tgt, 32) < 0:
                found = i
                break
    if found >= 0:
        return start + found, found + 1
    return -1, count


def race_outcomes(double[:, ::1] uniforms, double q, int z, int horizon):
    cdef Py_ssize_t runs = uniforms.shape[0]
    if uniforms.shape[1] < horizon + 1:
        raise ValueError("need horizon + 1 uniforms per run")
    out_arr = np.full(runs, -1, dtype=np.int32)
    cdef int[::1] out = out_arr
    if q <= 0.0:
        return out_arr
    cdef double log_q = log(q)
    cdef double cap = horizon + 2
    cdef double x
    cdef long long mined
    cdef Py_ssize_t r
    cdef int j, g
    with nogil:
        for r in range(runs):
            mined = 0
            for j in range(horizon + 1):
                x = log(1.0 - uniforms[r, j]) / log_q
                if x >= cap:
                    g = <int>cap
                else:
                    g = <int>x
                mined += g
                if j >= z and mined - j >= 1:
                    out[r] = j
                    break
    return out_arr

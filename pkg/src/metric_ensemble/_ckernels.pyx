# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
# distutils: language = c++
"""Compiled hot kernels. Mirrors ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libcpp.vector cimport vector
from libcpp.pair cimport pair
from libcpp.algorithm cimport partial_sort

cnp.import_array()


def chi2_distances(X, Y):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] y = np.ascontiguousarray(Y, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    if y.shape[1] != d:
        raise ValueError("dimension mismatch")
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, t
    cdef double acc, a, b, s, diff
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for t in range(d):
                    a = x[i, t]
                    b = y[j, t]
                    s = a + b
                    if s > 0.0:
                        diff = a - b
                        acc = acc + diff * diff / s
                out[i, j] = acc
    return out_arr


def sq_euclidean_distances(X, Y):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] y = np.ascontiguousarray(Y, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    if y.shape[1] != d:
        raise ValueError("dimension mismatch")
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, t
    cdef double acc, diff
    with nogil:
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for t in range(d):
                    diff = x[i, t] - y[j, t]
                    acc = acc + diff * diff
                out[i, j] = acc
    return out_arr


def topk_smallest(S, Py_ssize_t k):
    cdef const double[:, ::1] s = np.ascontiguousarray(S, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0], m = s.shape[1]
    if k < 0 or k > m:
        raise ValueError("k out of range")
    out_arr = np.empty((n, k), dtype=np.intp)
    cdef Py_ssize_t[:, ::1] out = out_arr
    cdef vector[pair[double, Py_ssize_t]] buf
    cdef Py_ssize_t i, j
    buf.resize(m)
    with nogil:
        for i in range(n):
            for j in range(m):
                buf[j].first = s[i, j]
                buf[j].second = j
            # pairs compare lexicographically: value first, then column index
            partial_sort(buf.begin(), buf.begin() + k, buf.end())
            for j in range(k):
                out[i, j] = buf[j].second
    return out_arr

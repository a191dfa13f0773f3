# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled longest-common-token-run kernel.

Rolling-row dynamic program over two int32 id sequences; O(len(a) * len(b))
time, O(min) space. Semantically identical to delm._kernels._lcs_py.lcs_run.
"""

from libc.stdlib cimport calloc, free
from libc.string cimport memset


def lcs_run(const int[::1] a, const int[::1] b):
    """Length of the longest common contiguous run between a and b."""
    cdef Py_ssize_t la = a.shape[0]
    cdef Py_ssize_t lb = b.shape[0]
    if la == 0 or lb == 0:
        return 0
    # keep the DP row on the shorter sequence
    if la > lb:
        a, b = b, a
        la, lb = lb, la
    cdef long long *prev = <long long *> calloc(la + 1, sizeof(long long))
    cdef long long *cur = <long long *> calloc(la + 1, sizeof(long long))
    if prev == NULL or cur == NULL:
        if prev != NULL:
            free(prev)
        if cur != NULL:
            free(cur)
        raise MemoryError()
    cdef Py_ssize_t i, j
    cdef long long best = 0, v
    cdef int bj
    cdef long long *tmp
    try:
        with nogil:
            for j in range(lb):
                bj = b[j]
                for i in range(la):
                    if a[i] == bj:
                        v = prev[i] + 1
                        cur[i + 1] = v
                        if v > best:
                            best = v
                    else:
                        cur[i + 1] = 0
                tmp = prev
                prev = cur
                cur = tmp
                memset(cur, 0, (la + 1) * sizeof(long long))
    finally:
        free(prev)
        free(cur)
    return best

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled AR-DTW kernels. Paths arrive in CSR form: element ``e`` owns the
embedding rows ``idx[off[e]:off[e + 1]]`` (more than one row for an AS set)."""
from libc.math cimport sqrt
from libc.stdlib cimport malloc, free


cdef inline double _elem_dist(const double[:, ::1] E,
                              const long long[::1] ai, Py_ssize_t a0, Py_ssize_t a1,
                              const long long[::1] bi, Py_ssize_t b0, Py_ssize_t b1) noexcept nogil:
    cdef double best = 0.0, acc, diff
    cdef Py_ssize_t p, q, k, ra, rb
    cdef Py_ssize_t dim = E.shape[1]
    # identical elements (same AS, or the same AS set) are at distance zero
    if a1 - a0 == b1 - b0:
        for p in range(a1 - a0):
            if ai[a0 + p] != bi[b0 + p]:
                break
        else:
            return 0.0
    for p in range(a0, a1):
        ra = ai[p]
        for q in range(b0, b1):
            rb = bi[q]
            if ra == rb:
                continue
            acc = 0.0
            for k in range(dim):
                diff = E[ra, k] - E[rb, k]
                acc += diff * diff
            if acc > best:
                best = acc
    return sqrt(best)


def element_distance(const double[:, ::1] E,
                     const long long[::1] a_idx, const long long[::1] b_idx):
    return _elem_dist(E, a_idx, 0, a_idx.shape[0], b_idx, 0, b_idx.shape[0])


def ar_dtw_csr(const double[:, ::1] E,
               const long long[::1] s_idx, const long long[::1] s_off,
               const long long[::1] t_idx, const long long[::1] t_off):
    cdef Py_ssize_t n = s_off.shape[0] - 1
    cdef Py_ssize_t m = t_off.shape[0] - 1
    cdef Py_ssize_t i, j
    cdef double c, best, up, left, diag, result
    if n < 1 or m < 1:
        raise ValueError("empty path")
    cdef double *prev = <double *> malloc(m * sizeof(double))
    cdef double *cur = <double *> malloc(m * sizeof(double))
    cdef double *tmp
    if prev == NULL or cur == NULL:
        free(prev)
        free(cur)
        raise MemoryError()
    with nogil:
        for i in range(n):
            for j in range(m):
                c = _elem_dist(E, s_idx, s_off[i], s_off[i + 1], t_idx, t_off[j], t_off[j + 1])
                if i == 0 and j == 0:
                    best = 0.0
                elif i == 0:
                    best = cur[j - 1]
                elif j == 0:
                    best = prev[j]
                else:
                    up = prev[j]
                    left = cur[j - 1]
                    diag = prev[j - 1]
                    best = up
                    if left < best:
                        best = left
                    if diag < best:
                        best = diag
                cur[j] = c + best
            tmp = prev
            prev = cur
            cur = tmp
        result = prev[m - 1]
    free(prev)
    free(cur)
    return result


def path_span_csr(const double[:, ::1] E, const long long[::1] idx, const long long[::1] off):
    cdef Py_ssize_t n = off.shape[0] - 1
    cdef Py_ssize_t i
    cdef double total = 0.0
    with nogil:
        for i in range(n - 1):
            total += _elem_dist(E, idx, off[i], off[i + 1], idx, off[i + 1], off[i + 2])
    return total

# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled matrix-product kernel with a pinned summation order.

Each output element accumulates a[i, k] * b[k, j] over ascending k, with one
rounding per multiply and one per add (build forces -ffp-contract=off, so no
FMA fusion). The loop nest is i-k-j for cache friendliness; per output element
the sequence of adds is identical to the naive i-j-k triple loop, and to the
pure-numpy fallback in _pykernels.py, so all three agree bit for bit.
"""

cimport cython

ctypedef fused real:
    float
    double


def matmul_into(real[:, ::1] a, real[:, ::1] b, real[:, ::1] out):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t kk = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef real a_ik
    with nogil:
        for i in range(m):
            for j in range(n):
                out[i, j] = 0
            for k in range(kk):
                a_ik = a[i, k]
                for j in range(n):
                    out[i, j] = out[i, j] + a_ik * b[k, j]

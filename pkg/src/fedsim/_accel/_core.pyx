# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Hot inner loops: K corrected local SGD steps for every sampled client.

The subspace kernel works on preprojected quantities (A_i P^T, A_i x_res),
so one local step costs O(b r m) instead of O(b d m); the full-space kernel
serves SCAFFOLD and FedAvg. Batch rows are gathered into contiguous buffers
and the two matrix products per step go through BLAS dgemm. Drivers keep all
RNG and aggregation in Python; these kernels are pure arithmetic on the
per-round buffers.
"""

import numpy as np

cimport numpy as cnp
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline void rm_dgemm(bint ta, bint tb, int m, int n, int k, double alpha,
                          double* A, int lda, double* B, int ldb,
                          double beta, double* C, int ldc) noexcept nogil:
    """Row-major C (m x n) = alpha * op(A) op(B) + beta * C via Fortran dgemm."""
    cdef char cta = b'T' if ta else b'N'
    cdef char ctb = b'T' if tb else b'N'
    dgemm(&ctb, &cta, &n, &m, &k, &alpha, B, &ldb, A, &lda, &beta, C, &ldc)


def ssf_local_steps(double[:, :, ::1] AP, double[:, :, ::1] AxR,
                    double[:, :, ::1] B, const cnp.int64_t[::1] clients,
                    const cnp.int64_t[:, :, ::1] batches,
                    double[:, ::1] x_proj, double[:, :, ::1] ci_proj,
                    double[:, ::1] c_proj, double eta_l, double lam,
                    double inv_nb, int K,
                    double[:, :, ::1] y_out, double[:, :, ::1] g_out):
    """Subspace local steps for all sampled clients of one round.

    AP[i]   : (n, r)  sampled client rows projected through P^T
    AxR[i]  : (n, m)  sampled client rows times the carried residual
    B       : (N, n, m) full target stack; clients[i] is the absolute
              client index simulated in kernel slot i
    batches : (S, K, b) minibatch row indices
    y_out[i]: final projected iterate, g_out[i]: sum of projected gradients
    """
    cdef int S = <int> AP.shape[0], r = <int> AP.shape[2]
    cdef int m = <int> B.shape[2], b = <int> batches.shape[2]
    cdef Py_ssize_t i, k, jb, j, row, cid
    cdef double gv

    apb_arr = np.empty((b, r))
    t1_arr = np.empty((b, m))
    g_arr = np.empty((r, m))
    cdef double[:, ::1] apb = apb_arr
    cdef double[:, ::1] t1 = t1_arr
    cdef double[:, ::1] g = g_arr
    cdef double* yp
    cdef double* gsum
    cdef double* gp = &g[0, 0]
    cdef double* cip
    cdef double* cp = &c_proj[0, 0]

    for i in range(S):
        cid = clients[i]
        yp = &y_out[i, 0, 0]
        gsum = &g_out[i, 0, 0]
        cip = &ci_proj[i, 0, 0]
        memcpy(yp, &x_proj[0, 0], r * m * sizeof(double))
        for j in range(r * m):
            gsum[j] = 0.0
        for k in range(K):
            for jb in range(b):
                row = batches[i, k, jb]
                memcpy(&apb[jb, 0], &AP[i, row, 0], r * sizeof(double))
                for j in range(m):
                    t1[jb, j] = AxR[i, row, j] - B[cid, row, j]
            # t1 += A_b P^T y ; g = (A_b P^T)^T t1 / n_b
            rm_dgemm(0, 0, b, m, r, 1.0, &apb[0, 0], r, yp, m, 1.0, &t1[0, 0], m)
            rm_dgemm(1, 0, r, m, b, inv_nb, &apb[0, 0], r, &t1[0, 0], m, 0.0, gp, m)
            for j in range(r * m):
                gv = gp[j] + lam * yp[j]
                gsum[j] += gv
                yp[j] -= eta_l * (gv - cip[j] + cp[j])


def full_local_steps(double[:, :, ::1] A, double[:, :, ::1] B,
                     const cnp.int64_t[::1] clients,
                     const cnp.int64_t[:, :, ::1] batches, double[:, ::1] X,
                     double[:, :, ::1] ci, double[:, ::1] c, int corrected,
                     double eta_l, double lam, double inv_nb, int K,
                     double[:, :, ::1] y_out, double[:, :, ::1] g_out):
    """Ambient-space local steps (SCAFFOLD correction when corrected != 0).

    A, B are the full (N, n, *) stacks; kernel slot i simulates absolute
    client clients[i]. ci is indexed by slot and ignored with corrected=0.
    """
    cdef int S = <int> y_out.shape[0], d = <int> A.shape[2]
    cdef int m = <int> B.shape[2], b = <int> batches.shape[2]
    cdef Py_ssize_t i, k, jb, j, row, cid
    cdef double gv

    ab_arr = np.empty((b, d))
    t1_arr = np.empty((b, m))
    g_arr = np.empty((d, m))
    cdef double[:, ::1] ab = ab_arr
    cdef double[:, ::1] t1 = t1_arr
    cdef double[:, ::1] g = g_arr
    cdef double* yp
    cdef double* gsum
    cdef double* gp = &g[0, 0]
    cdef double* cip
    cdef double* cp = NULL
    if corrected:
        cp = &c[0, 0]

    for i in range(S):
        cid = clients[i]
        yp = &y_out[i, 0, 0]
        gsum = &g_out[i, 0, 0]
        cip = &ci[i, 0, 0] if corrected else NULL
        memcpy(yp, &X[0, 0], d * m * sizeof(double))
        for j in range(d * m):
            gsum[j] = 0.0
        for k in range(K):
            for jb in range(b):
                row = batches[i, k, jb]
                memcpy(&ab[jb, 0], &A[cid, row, 0], d * sizeof(double))
                for j in range(m):
                    t1[jb, j] = -B[cid, row, j]
            # t1 += A_b y ; g = A_b^T t1 / n_b
            rm_dgemm(0, 0, b, m, d, 1.0, &ab[0, 0], d, yp, m, 1.0, &t1[0, 0], m)
            rm_dgemm(1, 0, d, m, b, inv_nb, &ab[0, 0], d, &t1[0, 0], m, 0.0, gp, m)
            if corrected:
                for j in range(d * m):
                    gv = gp[j] + lam * yp[j]
                    gsum[j] += gv
                    yp[j] -= eta_l * (gv - cip[j] + cp[j])
            else:
                for j in range(d * m):
                    gv = gp[j] + lam * yp[j]
                    gsum[j] += gv
                    yp[j] -= eta_l * gv

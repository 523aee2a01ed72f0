# cython: boundscheck=False, wraparound=False, initializedcheck=False, cdivision=True
"""Compiled AGD sweep kernel. Same contract as ``_pykernels``.

All buffers are C-contiguous complex128; the inner routines work on raw
pointers with explicit dimensions so no memoryview slicing happens in the
per-block loops.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef double complex zdouble

cdef enum:
    RAN_OUT = 0
    CONVERGED = 1
    DIVERGED = 2


cdef inline zdouble* zptr(object arr):
    return <zdouble*> cnp.PyArray_DATA(<cnp.ndarray> arr)


cdef void mm(const zdouble* A, const zdouble* B, zdouble* C,
             Py_ssize_t m, Py_ssize_t n, Py_ssize_t p) noexcept nogil:
    """C (m x p) = A (m x n) @ B (n x p)"""
    cdef Py_ssize_t i, l, j
    cdef zdouble a
    cdef zdouble* c
    cdef const zdouble* b
    for i in range(m):
        c = C + i * p
        for j in range(p):
            c[j] = 0
        for l in range(n):
            a = A[i * n + l]
            b = B + l * p
            for j in range(p):
                c[j] = c[j] + a * b[j]


cdef void mm_ah(const zdouble* A, const zdouble* B, zdouble* C,
                Py_ssize_t m, Py_ssize_t n, Py_ssize_t p) noexcept nogil:
    """C (n x p) = A^H @ B with A (m x n), B (m x p)"""
    cdef Py_ssize_t i, l, j
    cdef zdouble a
    cdef zdouble* c
    cdef const zdouble* b
    for i in range(n * p):
        C[i] = 0
    for l in range(m):
        b = B + l * p
        for i in range(n):
            a = A[l * n + i].conjugate()
            c = C + i * p
            for j in range(p):
                c[j] = c[j] + a * b[j]


cdef void mm_bh_acc(const zdouble* A, const zdouble* B, zdouble* C,
                    Py_ssize_t m, Py_ssize_t n, Py_ssize_t p) noexcept nogil:
    """C (m x p) += A @ B^H with A (m x n), B (p x n)"""
    cdef Py_ssize_t i, l, j
    cdef double re, im
    cdef const zdouble* a
    cdef const zdouble* b
    for i in range(m):
        a = A + i * n
        for j in range(p):
            b = B + j * n
            re = 0.0
            im = 0.0
            for l in range(n):
                # a * conj(b)
                re += a[l].real * b[l].real + a[l].imag * b[l].imag
                im += a[l].imag * b[l].real - a[l].real * b[l].imag
            C[i * p + j] = C[i * p + j] + (re + 1j * im)


cdef void scale_rows(zdouble* A, const zdouble* s, Py_ssize_t m, Py_ssize_t p) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(p):
            A[i * p + j] = A[i * p + j] * s[i]


cdef void scale_cols(zdouble* A, const zdouble* s, Py_ssize_t m, Py_ssize_t p) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(m):
        for j in range(p):
            A[i * p + j] = A[i * p + j] * s[j]


def sweep_loss(list factors, list diags, P, Yc, double inv_T, double loss_const):
    return _impl(factors, diags, P, Yc, inv_T, loss_const, 0.0, 0, 0.0, np.inf, None, None)[0][0]


def agd_run(list factors, list diags, P, Yc, double inv_T, double loss_const, double mu,
            Py_ssize_t n_iters, double stop_tol, double div_limit, rank_limits=None, project=None):
    for arr in factors:
        if not (arr.dtype == np.complex128 and arr.flags.c_contiguous and arr.flags.writeable):
            raise ValueError("factors must be writeable C-contiguous complex128 arrays")
    return _impl(factors, diags, P, Yc, inv_T, loss_const, mu, n_iters, stop_tol, div_limit,
                 rank_limits, project)


cdef tuple _impl(list factors, list diags, P_in, Yc_in, double inv_T, double loss_const, double mu,
                 Py_ssize_t n_iters, double stop_tol, double div_limit, rank_limits, project):
    cdef Py_ssize_t D = len(factors) - 1
    Yc_arr = np.ascontiguousarray(Yc_in, dtype=np.complex128)
    cdef Py_ssize_t K = Yc_arr.shape[0], LP = Yc_arr.shape[1], r = Yc_arr.shape[2]
    cdef Py_ssize_t d, k, i, it, done = 0
    cdef Py_ssize_t rows, cols, lp_r = LP * r
    cdef double cur, prev, total
    cdef zdouble step_scale = -mu * inv_T
    cdef bint has_lt
    cdef const zdouble* Yc = zptr(Yc_arr)
    cdef zdouble* Bm
    cdef zdouble* prev_rt
    cdef zdouble* rtd
    cdef zdouble* inner
    cdef zdouble* lt = NULL
    cdef zdouble* lt_new
    cdef zdouble* V
    cdef zdouble* grad
    cdef zdouble* s
    cdef zdouble* F
    cdef zdouble f
    cdef double[::1] trace = np.empty(n_iters + 1)

    diag_arrs = [np.ascontiguousarray(s_, dtype=np.complex128) for s_ in diags]
    rt = [np.ascontiguousarray(np.broadcast_to(P_in, (K,) + tuple(P_in.shape)), dtype=np.complex128)]
    inner_bufs, v_bufs, grad_bufs, lt_bufs = [], [], [], [None]
    for d in range(D + 1):
        rows, cols = factors[d].shape[0], factors[d].shape[1]
        if d > 0:
            rt.append(np.empty((K, cols, r), dtype=np.complex128))
            lt_bufs.append(np.empty((K, LP, cols), dtype=np.complex128))
        inner_bufs.append(np.empty((K, rows, r), dtype=np.complex128))
        v_bufs.append(np.empty((K, rows, r), dtype=np.complex128))
        grad_bufs.append(np.empty((rows, cols), dtype=np.complex128))
    F_arr = np.empty((K, LP, r), dtype=np.complex128)
    F = zptr(F_arr)
    shapes = np.array([f_.shape for f_ in factors], dtype=np.intp)
    cdef Py_ssize_t[:, ::1] shp = shapes

    for it in range(n_iters + 1):
        # right chains: rt[d][k] = S_d(k) B_{d-1} rt[d-1][k]
        for d in range(1, D + 1):
            rows, cols = shp[d - 1, 0], shp[d - 1, 1]
            Bm = zptr(factors[d - 1])
            prev_rt = zptr(rt[d - 1])
            rtd = zptr(rt[d])
            s = zptr(diag_arrs[d - 1])
            for k in range(K):
                mm(Bm, prev_rt + k * cols * r, rtd + k * rows * r, rows, cols, r)
                scale_rows(rtd + k * rows * r, s + k * rows, rows, r)

        has_lt = False
        for d in range(D, -1, -1):
            rows, cols = shp[d, 0], shp[d, 1]
            Bm = zptr(factors[d])
            rtd = zptr(rt[d])
            inner = zptr(inner_bufs[d])
            if has_lt:
                lt = zptr(lt_bufs[d + 1])
            total = 0.0
            for k in range(K):
                mm(Bm, rtd + k * cols * r, inner + k * rows * r, rows, cols, r)
                if has_lt:
                    mm(lt + k * LP * rows, inner + k * rows * r, F + k * lp_r, LP, rows, r)
                else:
                    for i in range(lp_r):
                        F[k * lp_r + i] = inner[k * lp_r + i]
                for i in range(k * lp_r, (k + 1) * lp_r):
                    f = F[i] - Yc[i]
                    F[i] = f
                    total += f.real * f.real + f.imag * f.imag
            if d == D:
                cur = (total + loss_const) * inv_T
                trace[it] = cur
                if not (cur <= div_limit):
                    return np.asarray(trace[: it + 1]).copy(), done, DIVERGED
                if it > 0:
                    prev = trace[it - 1]
                    if abs(prev - cur) < stop_tol * prev:
                        return np.asarray(trace[: it + 1]).copy(), done, CONVERGED
                if it == n_iters:
                    return np.asarray(trace[: it + 1]).copy(), done, RAN_OUT
            grad = zptr(grad_bufs[d])
            for i in range(rows * cols):
                grad[i] = 0
            V = zptr(v_bufs[d])
            for k in range(K):
                if has_lt:
                    mm_ah(lt + k * LP * rows, F + k * lp_r, V + k * rows * r, LP, rows, r)
                    mm_bh_acc(V + k * rows * r, rtd + k * cols * r, grad, rows, r, cols)
                else:
                    mm_bh_acc(F + k * lp_r, rtd + k * cols * r, grad, rows, r, cols)
            for i in range(rows * cols):
                Bm[i] = Bm[i] + step_scale * grad[i]
            if rank_limits is not None and rank_limits[d]:
                factors[d][...] = project(factors[d], rank_limits[d])
            if d > 0:
                s = zptr(diag_arrs[d - 1])
                lt_new = zptr(lt_bufs[d])
                for k in range(K):
                    if has_lt:
                        mm(lt + k * LP * rows, Bm, lt_new + k * LP * cols, LP, rows, cols)
                    else:
                        for i in range(LP * cols):
                            lt_new[k * LP * cols + i] = Bm[i]
                    scale_cols(lt_new + k * LP * cols, s + k * cols, LP, cols)
                has_lt = True
        done += 1
    return np.asarray(trace).copy(), done, RAN_OUT

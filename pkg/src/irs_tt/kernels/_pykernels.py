"""Pure-numpy AGD sweep kernel (fallback for the compiled ``_ckernels``).

Both backends work on a compressed measurement. With the reduced QR
factorization ``X^H = Q R`` and ``P = R^H``::

    ||B_k X - Y_k||^2 = ||B_k P - Y_k Q||^2 + ||Y_k - Y_k Q Q^H||^2

so the loss and every Wirtinger gradient only need ``P`` (UM x r) and
``Yc[k] = Y_k Q`` (LP x r); the second term is the constant ``loss_const``.

Inputs (shared by both backends)
    factors   list of C-contiguous complex128 matrices B_0..B_D, updated in place
    diags     list of (K, N_d) complex128 phase diagonals, hops 1..D
    P         (UM, r) complex128
    Yc        (K, LP, r) complex128
    rank_limits  sequence of ints per factor (0 = no projection)
    project   callable(matrix, r) -> matrix, used when a rank limit is set

Returns ``(trace, sweeps_done, status)``; ``trace[i]`` is the loss after
``i`` sweeps. Status codes are listed below.
"""

import numpy as np

RAN_OUT = 0
CONVERGED = 1
DIVERGED = 2


def _right_chains(factors, diags, P):
    """``Rt[d][k] = S_d(k) B_{d-1} ... S_1(k) B_0 P`` for d = 0..D (``Rt[0] = P``)."""
    K = diags[0].shape[0]
    rt = [np.broadcast_to(P, (K,) + P.shape)]
    for d in range(1, len(factors)):
        rt.append(diags[d - 1][:, :, None] * (factors[d - 1] @ rt[d - 1]))
    return rt


def _loss(F, inv_T, loss_const):
    return (float(np.vdot(F, F).real) + loss_const) * inv_T


def sweep_loss(factors, diags, P, Yc, inv_T, loss_const):
    rt = _right_chains(factors, diags, P)
    F = factors[-1] @ rt[-1] - Yc
    return _loss(F, inv_T, loss_const)


def agd_run(factors, diags, P, Yc, inv_T, loss_const, mu, n_iters,
            stop_tol, div_limit, rank_limits=None, project=None):
    D = len(factors) - 1
    trace = np.empty(n_iters + 1)
    status = RAN_OUT
    done = 0
    for it in range(n_iters + 1):
        rt = _right_chains(factors, diags, P)
        lt = None
        for d in range(D, -1, -1):
            B = factors[d]
            inner = B @ rt[d]
            F = (inner if lt is None else lt @ inner) - Yc
            if d == D:
                cur = _loss(F, inv_T, loss_const)
                trace[it] = cur
                if not np.isfinite(cur) or cur > div_limit:
                    return trace[: it + 1], done, DIVERGED
                if it > 0:
                    prev = trace[it - 1]
                    if abs(prev - cur) < stop_tol * prev:
                        return trace[: it + 1], done, CONVERGED
                if it == n_iters:
                    return trace[: it + 1], done, status
            V = F if lt is None else lt.conj().transpose(0, 2, 1) @ F
            grad = inv_T * np.einsum("kir,kjr->ij", V, rt[d].conj())
            B -= mu * grad
            if rank_limits is not None and rank_limits[d]:
                B[...] = project(B, rank_limits[d])
            if d > 0:
                step = B * diags[d - 1][:, None, :]
                lt = step if lt is None else lt @ step
        done += 1
    return trace, done, status

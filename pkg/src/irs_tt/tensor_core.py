"""Dense complex tensor algebra used by the channel model and the estimators.

Tensors are plain ``numpy`` arrays of dtype ``complex128`` (interleaved
re/im storage). Mode indices are 0-based, as in ``numpy``.

Index conventions
-----------------
``unfold(A, 1)`` maps ``A(s1, s2, s3)`` to row ``s1`` and column
``s2 + d2*s3`` (first remaining index fastest, i.e. Fortran order), and
``unfold(A, 2)`` maps it to row ``s1 + d1*s2`` and column ``s3``.
``kron`` is the standard Kronecker product. With those two fixed, a TT
factor ``F`` of shape ``(r0, n, r1)`` has

* ``left_unfold(F)``  of shape ``(r0*n, r1)``, the slices ``F[:, s, :]``
  stacked vertically (row ``a + r0*s``), and
* ``right_unfold(F)`` of shape ``(r0, n*r1)`` with column ``s + n*b``,

so that for ``B = [H, S, G]``::

    unfold(B, 1) == H @ right_unfold(S) @ kron(G, I_K)
    unfold(B, 2) == kron(I_K, H) @ left_unfold(S) @ G
"""

import numpy as np

from .errors import DimensionMismatch, NumericalFailure, RankOutOfRange

DEFAULT_PINV_TOL = 1e-12


def as_ctensor(a, ndim=None):
    """Return ``a`` as a complex128 array, checking order and finiteness."""
    arr = np.asarray(a, dtype=np.complex128)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionMismatch(f"expected an order-{ndim} tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor has non-finite entries")
    return arr


def matrix_as_tensor3(A, unit_mode=1):
    """View a matrix as an order-3 tensor with a unit mode inserted at ``unit_mode``."""
    return np.expand_dims(np.asarray(A, dtype=np.complex128), unit_mode)


def tensor3_as_matrix(A):
    """Drop the unit mode of an order-3 tensor that has exactly one."""
    A = np.asarray(A)
    unit = [i for i, d in enumerate(A.shape) if d == 1]
    if A.ndim != 3 or not unit:
        raise DimensionMismatch(f"shape {A.shape} has no unit mode")
    return np.squeeze(A, axis=unit[0])


def frobenius_norm(A):
    return float(np.linalg.norm(np.ravel(A)))


def contract(A, i, B, j):
    """Contract mode ``i`` of ``A`` with mode ``j`` of ``B``.

    The result carries the remaining modes of ``A`` followed by the
    remaining modes of ``B``.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    if A.shape[i] != B.shape[j]:
        raise DimensionMismatch(
            f"mode {i} of A has length {A.shape[i]}, mode {j} of B has length {B.shape[j]}"
        )
    return np.tensordot(A, B, axes=(i, j))


def contract_pair(A, modes_a, B, modes_b):
    """Contract two modes of ``A`` with two modes of ``B`` simultaneously."""
    A = np.asarray(A)
    B = np.asarray(B)
    (i1, i2), (j1, j2) = modes_a, modes_b
    if A.shape[i1] != B.shape[j1] or A.shape[i2] != B.shape[j2]:
        raise DimensionMismatch(
            f"modes {modes_a} of A {A.shape} do not match modes {modes_b} of B {B.shape}"
        )
    return np.tensordot(A, B, axes=((i1, i2), (j1, j2)))


def unfold(A, split):
    """Matricize an order-3 tensor; ``split`` is 1 or 2 (see module notes)."""
    A = np.asarray(A)
    d1, d2, d3 = A.shape
    if split == 1:
        return A.reshape(d1, d2 * d3, order="F")
    if split == 2:
        return A.reshape(d1 * d2, d3, order="F")
    raise ValueError(f"split must be 1 or 2, got {split}")


def fold(M, dims, split):
    """Inverse of :func:`unfold`."""
    d1, d2, d3 = dims
    expected = (d1, d2 * d3) if split == 1 else (d1 * d2, d3)
    if M.shape != expected:
        raise DimensionMismatch(f"cannot fold {M.shape} into {dims} at split {split}")
    return np.asarray(M).reshape(dims, order="F")


def left_unfold(F):
    return unfold(F, 2)


def right_unfold(F):
    return unfold(F, 1)


def kron(A, B):
    return np.kron(np.asarray(A), np.asarray(B))


def _svd(A):
    try:
        return np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD did not converge: {exc}") from exc


def pinv_rank(A, tol=DEFAULT_PINV_TOL):
    """Pseudoinverse plus the number of singular values kept."""
    A = np.asarray(A, dtype=np.complex128)
    if A.size == 0:
        raise ValueError("pinv of an empty matrix")
    U, s, Vh = _svd(A)
    smax = s[0] if s.size else 0.0
    keep = s > tol * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vh.conj().T * inv) @ U.conj().T, int(keep.sum())


def pinv(A, tol=DEFAULT_PINV_TOL):
    """Moore-Penrose pseudoinverse; singular values below ``tol * s_max`` are dropped."""
    return pinv_rank(A, tol)[0]


def truncated_svd(A, r):
    U, s, Vh = _svd(A)
    return U[:, :r], s[:r], Vh[:r]


def tt_svd3(A, ranks):
    """Sequential truncated-SVD tensor-train factorization of an order-3 tensor.

    Returns ``(G1, G2, G3)`` with shapes ``(d1, r1)``, ``(r1, d2, r2)`` and
    ``(r2, d3)`` such that ``A[a, b, c] ~= G1[a] @ G2[:, b, :] @ G3[:, c]``.
    """
    A = np.asarray(A, dtype=np.complex128)
    d1, d2, d3 = A.shape
    r1, r2 = ranks
    if not 1 <= r1 <= min(d1, d2 * d3):
        raise RankOutOfRange(f"r1={r1} outside [1, {min(d1, d2 * d3)}]")
    if not 1 <= r2 <= min(d1 * d2, d3):
        raise RankOutOfRange(f"r2={r2} outside [1, {min(d1 * d2, d3)}]")

    U, s, Vh = truncated_svd(A.reshape(d1, d2 * d3), r1)
    G1 = U
    core = (s[:, None] * Vh).reshape(r1 * d2, d3)
    U2, s2, Vh2 = truncated_svd(core, r2)
    G3 = s2[:, None] * Vh2
    short = r2 - U2.shape[1]
    if short > 0:
        # r1*d2 < r2: pad with zero rank directions
        U2 = np.hstack([U2, np.zeros((U2.shape[0], short), dtype=U2.dtype)])
        G3 = np.vstack([G3, np.zeros((short, d3), dtype=G3.dtype)])
    G2 = U2.reshape(r1, d2, r2)
    return G1, G2, G3


def tt_full3(G1, G2, G3):
    return np.einsum("ai,ibj,jc->abc", G1, G2, G3)

"""Channel-factor estimators: ALS, Wirtinger AGD, a TT-SVD baseline.

All solvers take the known phase schedule and return an
:class:`EstimateResult`; errors are always measured on the channel tensor,
never on individual factors, because ``(H, G)`` are only identifiable up
to a diagonal rescaling.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, DimensionMismatch, Diverged, RankOutOfRange
from .system_model import (
    PilotMatrix,
    TTChannel,
    apply_pilots,
    build_ground_truth,
    build_phase_tensor,
    chain_from,
    check_chain,
    complex_normal,
    phase_tensor_diagonals,
    tt_from_factors,
)
from .tensor_core import (
    DEFAULT_PINV_TOL,
    contract,
    contract_pair,
    kron,
    left_unfold,
    pinv,
    pinv_rank,
    right_unfold,
    truncated_svd,
    tt_full3,
    tt_svd3,
    unfold,
)

DIVERGENCE_FACTOR = 1e6


@dataclass
class SolverOptions:
    max_iters: int = 100
    step_size: float = 0.2
    pinv_tol: float = DEFAULT_PINV_TOL
    rank_limits: Optional[Sequence[int]] = None
    stop_tol: float = 0.0
    init_seed: int = 0
    init_scale: str = "unit"
    backend: Optional[str] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")
        if not self.stop_tol >= 0:
            raise ConfigError(f"stop_tol must be >= 0, got {self.stop_tol}")
        if self.init_scale not in ("unit", "raw"):
            raise ConfigError(f"init_scale must be 'unit' or 'raw', got {self.init_scale!r}")


@dataclass
class EstimateResult:
    estimate: TTChannel
    loss_trace: np.ndarray
    iterations: int
    converged: bool
    rank_deficient: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def factors(self):
        return self.estimate.channels.factors

    def tensor(self):
        return build_ground_truth(self.estimate)


def _pilot_array(X):
    return X.X if isinstance(X, PilotMatrix) else np.asarray(X, dtype=np.complex128)


def loss(tt, X, Y):
    """``(1/T) ||B x_3 X - Y||_F^2`` for the channel tensor of ``tt``."""
    Xa = _pilot_array(X)
    R = apply_pilots(build_ground_truth(tt), Xa)
    if R.shape != Y.shape:
        raise DimensionMismatch(f"model output {R.shape} vs data {Y.shape}")
    R = R - Y
    return float(np.vdot(R, R).real) / Xa.shape[1]


def random_init(shapes, seed, scale="unit"):
    """Complex standard normal factors; ``scale="unit"`` rescales each to unit Frobenius norm."""
    rng = np.random.default_rng(seed)
    out = []
    for shape in shapes:
        B = complex_normal(rng, shape)
        if scale == "unit":
            B /= np.linalg.norm(B)
        out.append(B)
    return out


def rank_project(A, r):
    """Best rank-``r`` approximation (truncated SVD)."""
    A = np.asarray(A, dtype=np.complex128)
    if not 1 <= r <= min(A.shape):
        raise RankOutOfRange(f"rank {r} outside [1, {min(A.shape)}] for shape {A.shape}")
    U, s, Vh = truncated_svd(A, r)
    return (U * s) @ Vh


# ---------------------------------------------------------------- ALS


def _as_phase_tensor(S):
    S = np.asarray(S, dtype=np.complex128)
    if S.ndim != 3 or S.shape[0] != S.shape[2]:
        raise DimensionMismatch(f"phase tensor must be N x K x N, got {S.shape}")
    return S


def pilot_backprojection(Y, X, tol=DEFAULT_PINV_TOL):
    """``Y x_3 pinv(X)``, an estimate of the channel tensor when ``T >= UM``."""
    return Y @ pinv(_pilot_array(X), tol)


def _als_H(Z1, S, G, K, tol):
    A = right_unfold(S) @ kron(G, np.eye(K))
    Ap, rank = pinv_rank(A, tol)
    return Z1 @ Ap, rank < min(A.shape)


def _als_G(Z2, S, H, K, tol):
    A = kron(np.eye(K), H) @ left_unfold(S)
    Ap, rank = pinv_rank(A, tol)
    return Ap @ Z2, rank < min(A.shape)


def als_step_single(H, G, S, X, Y, opts=None, Z=None):
    """One ALS round: closed-form H update, then G update with the new H.

    Returns ``(H_next, G_next, rank_deficient)``.
    """
    opts = opts or SolverOptions()
    S = _as_phase_tensor(S)
    if Z is None:
        Z = pilot_backprojection(Y, X, opts.pinv_tol)
    K = S.shape[1]
    if Z.shape[1] != K or H.shape[1] != S.shape[0] or G.shape[0] != S.shape[0]:
        raise DimensionMismatch(f"Z {Z.shape}, S {S.shape}, H {H.shape}, G {G.shape}")
    H_next, def_h = _als_H(unfold(Z, 1), S, G, K, opts.pinv_tol)
    if opts.rank_limits:
        H_next = rank_project(H_next, opts.rank_limits[1])
    G_next, def_g = _als_G(unfold(Z, 2), S, H_next, K, opts.pinv_tol)
    if opts.rank_limits:
        G_next = rank_project(G_next, opts.rank_limits[0])
    return H_next, G_next, def_h or def_g


def _check_T(X):
    Xa = _pilot_array(X)
    if Xa.shape[1] < Xa.shape[0]:
        raise ConfigError(f"needs T >= UM for the pilot pseudoinverse, got T={Xa.shape[1]}, UM={Xa.shape[0]}")
    return Xa


def als_single(init, sched, X, Y, opts=None):
    """Alternating least squares for ``D = 1``; ``init`` is ``(H0, G0)``."""
    opts = opts or SolverOptions()
    Xa = _check_T(X)
    if sched.D != 1:
        raise ConfigError("ALS is defined for single-hop systems only")
    S = build_phase_tensor(sched, 1)
    H, G = (np.array(a, dtype=np.complex128) for a in init)
    Z = pilot_backprojection(Y, Xa, opts.pinv_tol)

    def cur_loss():
        return loss(tt_from_factors([G, H], sched), Xa, Y)

    trace = [cur_loss()]
    deficient = False
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        H, G, flag = als_step_single(H, G, S, Xa, Y, opts, Z=Z)
        deficient |= flag
        trace.append(cur_loss())
        prev = trace[-2]
        if abs(prev - trace[-1]) < opts.stop_tol * prev:
            converged = True
            break
    return EstimateResult(tt_from_factors([G, H], sched), np.asarray(trace), it, converged, deficient)


# ---------------------------------------------------------------- gradients


def wirtinger_grads_single(H, G, S, X, Y):
    """Wirtinger gradients of ``f = (1/T)||[H,S,G] x_3 X - Y||^2`` w.r.t. ``H*`` and ``G*``.

    Built from tensor contractions exactly as written for the single-hop
    model; kept independent from the chain kernels so the two can check
    each other.
    """
    S = _as_phase_tensor(S)
    Xa = _pilot_array(X)
    T = Xa.shape[1]
    B = contract(contract(H, 1, S, 0), 2, G, 0)
    R = contract(B, 2, Xa, 0) - Y
    RX = contract(R, 2, Xa.conj(), 1)  # (LP, K, UM)
    SG = contract(S.conj(), 2, G.conj(), 0)  # (N, K, UM)
    grad_H = contract_pair(RX, (1, 2), SG, (1, 2)) / T
    HS = contract(H.conj(), 1, S.conj(), 0)  # (LP, K, N)
    grad_G = contract_pair(HS, (0, 1), RX, (0, 1)) / T
    return grad_H, grad_G


def _chain(mats):
    out = mats[0]
    for m in mats[1:]:
        out = out @ m
    return out


def wirtinger_grad_multi(factors, diagonals, X, Y, d):
    """Wirtinger gradient of the multi-hop loss w.r.t. ``B_d*`` (``d`` in 0..D).

    ``diagonals`` holds the ``(K, N_d)`` phase diagonals of hops 1..D; a
    dense ``N x K x N`` phase tensor is accepted too.
    """
    Xa = _pilot_array(X)
    D = len(factors) - 1
    if not 0 <= d <= D:
        raise ValueError(f"factor index {d} outside 0..{D}")
    diags = [phase_tensor_diagonals(s) if s.ndim == 3 else s for s in diagonals]
    T = Xa.shape[1]
    K = diags[0].shape[0]
    B = chain_from(factors, diags)
    E = (B @ Xa - Y) @ Xa.conj().T  # (LP, K, UM)
    grad = np.zeros(factors[d].shape, dtype=np.complex128)
    for k in range(K):
        # B_k = left @ B_d @ right
        left = [np.eye(factors[-1].shape[0])]
        for j in range(D, d, -1):
            left += [factors[j], np.diag(diags[j - 1][k])]
        right = [np.eye(factors[d].shape[1])]
        for j in range(d, 0, -1):
            right += [np.diag(diags[j - 1][k]), factors[j - 1]]
        L, R = _chain(left), _chain(right)
        grad += L.conj().T @ E[:, k, :] @ R.conj().T
    return grad / T


# ---------------------------------------------------------------- AGD


@dataclass
class _Compressed:
    P: np.ndarray
    Yc: np.ndarray
    loss_const: float
    inv_T: float
    y_scale: float


def compress_measurements(X, Y):
    """Reduce ``(X, Y)`` so loss and gradients cost O(UM) per time axis instead of O(T)."""
    Xa = _pilot_array(X)
    T = Xa.shape[1]
    if Y.shape[2] != T:
        raise DimensionMismatch(f"Y has {Y.shape[2]} time slots, X has {T}")
    Q, R = np.linalg.qr(Xa.conj().T)
    YQ = Y @ Q
    perp = Y - YQ @ Q.conj().T
    return _Compressed(
        P=np.ascontiguousarray(R.conj().T),
        Yc=np.ascontiguousarray(YQ.transpose(1, 0, 2)),
        loss_const=float(np.vdot(perp, perp).real),
        inv_T=1.0 / T,
        y_scale=float(np.vdot(Y, Y).real) / T,
    )


def _agd(factors, sched, X, Y, opts):
    opts = opts or SolverOptions()
    diags = [np.ascontiguousarray(s) for s in sched.all_diagonals()]
    work = [np.array(f, dtype=np.complex128, order="C") for f in factors]
    check_chain(work, diags)
    if Y.shape != (work[-1].shape[0], diags[0].shape[0], _pilot_array(X).shape[1]):
        raise DimensionMismatch(f"Y shape {Y.shape} does not match the factor chain")
    comp = compress_measurements(X, Y)
    backend = kernels.get_backend(opts.backend)
    first = backend.sweep_loss(work, diags, comp.P, comp.Yc, comp.inv_T, comp.loss_const)
    div_limit = DIVERGENCE_FACTOR * max(first, comp.y_scale)
    rank_limits = None
    if opts.rank_limits:
        if len(opts.rank_limits) != len(work):
            raise ConfigError(f"rank_limits needs {len(work)} entries, got {len(opts.rank_limits)}")
        rank_limits = [int(r) for r in opts.rank_limits]
    trace, done, status = backend.agd_run(
        work, diags, comp.P, comp.Yc, comp.inv_T, comp.loss_const, opts.step_size,
        opts.max_iters, opts.stop_tol, div_limit, rank_limits, rank_project,
    )
    if status == kernels.DIVERGED:
        raise Diverged(
            f"AGD diverged after {done} sweeps (loss {trace[-1]:.3e}, step size {opts.step_size})",
            loss_trace=trace,
        )
    return EstimateResult(
        tt_from_factors(work, sched), trace, done, status == kernels.CONVERGED,
        extra={"backend": backend.__name__.rsplit(".", 1)[-1]},
    )


def agd_single(init, sched, X, Y, opts=None):
    """Alternating Wirtinger gradient descent for ``D = 1``; ``init`` is ``(H0, G0)``.

    Each iteration updates H, then G using the gradient at the new H.
    """
    if sched.D != 1:
        raise ConfigError("agd_single needs a single-hop schedule")
    H0, G0 = init
    return _agd([G0, H0], sched, X, Y, opts)


def agd_multi(init, sched, X, Y, opts=None):
    """Alternating Wirtinger gradient descent over ``B_0..B_D``.

    Each sweep updates ``B_D`` first and ``B_0`` last; every gradient sees the
    factors already refreshed earlier in the same sweep.
    """
    return _agd(list(init), sched, X, Y, opts)


# ---------------------------------------------------------------- baseline


def ttsvd_baseline(Y, X, ranks, pinv_tol=DEFAULT_PINV_TOL):
    """TT-SVD of ``Y x_3 pinv(X)``, reconstructed; ignores the phase schedule."""
    Xa = _check_T(X)
    Z = pilot_backprojection(Y, Xa, pinv_tol)
    return tt_full3(*tt_svd3(Z, ranks))

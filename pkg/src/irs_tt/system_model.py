"""Scenario generation and the forward measurement model.

A scenario is a chain of ``D + 1`` channel matrices ``B_0 .. B_D``
(``B_0`` is UT -> first IRS, ``B_D`` is last IRS -> BS) interleaved with
``D`` known diagonal phase tensors. For ``D = 1`` the pair ``(H, G)`` is
``(B_1, B_0)``.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch

PHASE_POLICIES = ("random-uniform", "all-on-zero-phase")
PILOT_KINDS = ("gaussian", "bernoulli", "psk", "qam", "dft")


@dataclass(frozen=True)
class SystemConfig:
    L: int = 10
    P: int = 1
    U: int = 1
    M: int = 10
    K: int = 10
    T: int = 100
    irs_sizes: tuple = (10,)
    noise_var: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "irs_sizes", tuple(int(n) for n in self.irs_sizes))
        for name in ("L", "P", "U", "M", "K", "T"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.irs_sizes or min(self.irs_sizes) < 1:
            raise ConfigError(f"irs_sizes must be a nonempty list of positive ints, got {self.irs_sizes}")
        if not self.noise_var >= 0:
            raise ConfigError(f"noise_var must be >= 0, got {self.noise_var}")

    @property
    def D(self):
        return len(self.irs_sizes)

    @property
    def UM(self):
        return self.U * self.M

    @property
    def LP(self):
        return self.L * self.P

    @property
    def chain_sizes(self):
        """``(N_0, N_1, ..., N_D, N_{D+1})`` with ``N_0 = UM`` and ``N_{D+1} = LP``."""
        return (self.UM,) + self.irs_sizes + (self.LP,)

    @property
    def factor_shapes(self):
        n = self.chain_sizes
        return [(n[d + 1], n[d]) for d in range(self.D + 1)]

    @classmethod
    def single_hop(cls, LP=10, UM=10, N=10, K=10, T=100, noise_var=1e-6):
        return cls(L=LP, P=1, U=1, M=UM, K=K, T=T, irs_sizes=(N,), noise_var=noise_var)


@dataclass
class PhaseSchedule:
    """Per hop, ``(K, N_d)`` arrays of on/off amplitudes and phases in (0, 2*pi]."""

    amplitudes: list
    phases: list

    @property
    def D(self):
        return len(self.amplitudes)

    def diagonals(self, d):
        """Diagonal entries ``s_d(k)`` as a ``(K, N_d)`` complex array; ``d`` is 1-based."""
        amp, phase = self.amplitudes[d - 1], self.phases[d - 1]
        rot = np.exp(1j * phase)
        # exp(2j*pi) is not exactly 1 in floating point
        rot[phase == 2 * np.pi] = 1.0
        return amp * rot

    def all_diagonals(self):
        return [self.diagonals(d) for d in range(1, self.D + 1)]


@dataclass
class ChannelSet:
    factors: list  # [B_0, ..., B_D]

    @property
    def D(self):
        return len(self.factors) - 1

    @property
    def H(self):
        return self.factors[-1]

    @property
    def G(self):
        return self.factors[0]


@dataclass
class PilotMatrix:
    X: np.ndarray
    kind: str = "gaussian"
    order: Optional[int] = None

    @property
    def T(self):
        return self.X.shape[1]


@dataclass
class TTChannel:
    channels: ChannelSet
    phases: PhaseSchedule
    config: Optional[SystemConfig] = field(default=None)

    def __post_init__(self):
        check_chain(self.channels.factors, self.phases.all_diagonals())


def _rng(seed):
    return np.random.default_rng(seed)


def complex_normal(rng, shape, var=1.0):
    """Circular complex normal entries: re and im each ``N(0, var/2)``."""
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def gen_channels(config, rng_seed, normalize=True):
    rng = _rng(rng_seed)
    factors = []
    for shape in config.factor_shapes:
        B = complex_normal(rng, shape)
        if normalize:
            B /= np.linalg.norm(B)
        factors.append(B)
    return ChannelSet(factors)


def gen_phase_schedule(config, rng_seed, policy="random-uniform"):
    rng = _rng(rng_seed)
    amps, phases = [], []
    for n in config.irs_sizes:
        amps.append(np.ones((config.K, n)))
        if policy == "random-uniform":
            # uniform on (0, 2*pi]
            phases.append(2 * np.pi - rng.uniform(0.0, 2 * np.pi, size=(config.K, n)))
        elif policy == "all-on-zero-phase":
            phases.append(np.full((config.K, n), 2 * np.pi))
        else:
            raise ConfigError(f"unknown phase policy {policy!r}; choose from {PHASE_POLICIES}")
    return PhaseSchedule(amps, phases)


def build_phase_tensor(sched, d):
    """Dense ``N_d x K x N_d`` phase tensor of hop ``d`` (1-based)."""
    diag = sched.diagonals(d)
    K, n = diag.shape
    S = np.zeros((n, K, n), dtype=np.complex128)
    idx = np.arange(n)
    S[idx, :, idx] = diag.T
    return S


def phase_tensor_diagonals(S):
    """Inverse of :func:`build_phase_tensor`: the ``(K, N)`` diagonal entries."""
    n = S.shape[0]
    idx = np.arange(n)
    return S[idx, :, idx].T.copy()


def check_chain(factors, diagonals):
    if len(factors) != len(diagonals) + 1:
        raise DimensionMismatch(f"{len(factors)} factors for {len(diagonals)} hops")
    for d, s in enumerate(diagonals, start=1):
        n = s.shape[1]
        if factors[d - 1].shape[0] != n or factors[d].shape[1] != n:
            raise DimensionMismatch(
                f"hop {d}: B_{d - 1} {factors[d - 1].shape}, S_{d} size {n}, B_{d} {factors[d].shape}"
            )
    K = {s.shape[0] for s in diagonals}
    if len(K) > 1:
        raise DimensionMismatch(f"hops disagree on K: {sorted(K)}")


def chain_slices(factors, diagonals):
    """Per-block products ``B_D S_D(k) ... S_1(k) B_0`` as a ``(K, LP, UM)`` array."""
    check_chain(factors, diagonals)
    acc = diagonals[0][:, :, None] * factors[0][None, :, :]
    for d in range(1, len(factors)):
        acc = factors[d] @ acc
        if d < len(diagonals):
            acc = diagonals[d][:, :, None] * acc
    return acc


def build_ground_truth(tt):
    """Channel tensor of shape ``(LP, K, UM)``, evaluated one block at a time."""
    return chain_from(tt.channels.factors, tt.phases.all_diagonals())


def chain_from(factors, diagonals):
    return np.ascontiguousarray(chain_slices(factors, diagonals).transpose(1, 0, 2))


def _unit_power_qam(order, rng, shape):
    side = int(round(np.sqrt(order)))
    if side * side != order or side < 2:
        raise ConfigError(f"qam order must be a square >= 4, got {order}")
    levels = np.arange(-(side - 1), side, 2, dtype=float)
    # mean |level|^2 per axis is (side^2 - 1)/3
    scale = np.sqrt(2 * (side * side - 1) / 3.0)
    re = rng.choice(levels, size=shape)
    im = rng.choice(levels, size=shape)
    return (re + 1j * im) / scale


def dft_pilots(UM, T):
    if T < UM:
        raise ConfigError(f"dft pilots need T >= UM, got T={T}, UM={UM}")
    m = np.arange(UM)[:, None]
    t = np.arange(T)[None, :]
    return np.exp(-2j * np.pi * ((m * t) % T) / T)


def gen_pilots(config, kind="gaussian", rng_seed=0, order=None):
    UM, T = config.UM, config.T
    rng = _rng(rng_seed)
    shape = (UM, T)
    if kind == "gaussian":
        X = complex_normal(rng, shape)
    elif kind == "bernoulli":
        X = rng.choice([-1.0, 1.0], size=shape).astype(np.complex128)
    elif kind == "psk":
        order = order or 4
        X = np.exp(2j * np.pi * rng.integers(0, order, size=shape) / order)
    elif kind == "qam":
        order = order or 16
        X = _unit_power_qam(order, rng, shape)
    elif kind == "dft":
        X = dft_pilots(UM, T)
    else:
        raise ConfigError(f"unknown pilot kind {kind!r}; choose from {PILOT_KINDS}")
    return PilotMatrix(np.asarray(X, dtype=np.complex128), kind, order)


def parse_pilot_kind(text):
    """``"psk8"`` -> ``("psk", 8)``, ``"gaussian"`` -> ``("gaussian", None)``."""
    text = text.strip().lower()
    for kind in ("psk", "qam"):
        if text.startswith(kind) and text[len(kind):].isdigit():
            return kind, int(text[len(kind):])
    if text not in PILOT_KINDS:
        raise ConfigError(f"unknown pilot kind {text!r}; choose from {PILOT_KINDS}")
    return text, None


def apply_pilots(B, X):
    """Noiseless measurement ``B x_3 X``."""
    X = X.X if isinstance(X, PilotMatrix) else np.asarray(X)
    if B.shape[2] != X.shape[0]:
        raise DimensionMismatch(f"channel tensor has UM={B.shape[2]}, pilot matrix has {X.shape[0]} rows")
    return B @ X


def measure(B, X, noise_var, rng_seed):
    """``Y = B x_3 X + W`` with ``W`` iid CN(0, noise_var)."""
    Y = apply_pilots(B, X)
    if noise_var > 0:
        Y = Y + complex_normal(_rng(rng_seed), Y.shape, noise_var)
    return Y


def random_tt_channel(config, seed_channels, seed_phases, policy="random-uniform"):
    channels = gen_channels(config, seed_channels)
    sched = gen_phase_schedule(config, seed_phases, policy)
    return TTChannel(channels, sched, config)


def tt_from_factors(factors: Sequence[np.ndarray], sched, config=None):
    return TTChannel(ChannelSet([np.asarray(f, dtype=np.complex128) for f in factors]), sched, config)

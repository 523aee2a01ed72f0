import numpy as np
import pytest

from irs_tt.system_model import SystemConfig, build_ground_truth, gen_pilots, measure, random_tt_channel


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def make_instance(cfg, seed=0, noise_var=None, kind="gaussian", policy="random-uniform"):
    """Ground-truth channel, pilots and measurements for one seeded scenario."""
    tt = random_tt_channel(cfg, seed * 3 + 1, seed * 3 + 2, policy)
    B = build_ground_truth(tt)
    X = gen_pilots(cfg, kind, seed * 3 + 3).X
    nv = cfg.noise_var if noise_var is None else noise_var
    Y = measure(B, X, nv, seed + 1000)
    return tt, B, X, Y


@pytest.fixture
def small_single():
    cfg = SystemConfig(L=4, P=1, U=1, M=4, K=3, T=6, irs_sizes=(3,), noise_var=0.0)
    return cfg


@pytest.fixture
def small_double():
    cfg = SystemConfig(L=4, P=1, U=1, M=4, K=3, T=6, irs_sizes=(3, 3), noise_var=0.0)
    return cfg

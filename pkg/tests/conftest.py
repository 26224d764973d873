import numpy as np
import pytest

from slicesolver.linalg import make_rng
from slicesolver.meshes import gen_sphere_mesh, manufactured_field
from slicesolver.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return make_rng(0)


def small_config(**overrides) -> ModelConfig:
    kw = dict(layers=2, heads=2, channels=8, slices=4, in_dim=3, out_dim=1, ffn_hidden=16)
    kw.update(overrides)
    return ModelConfig(**kw)


def small_mesh(n=32, seed=3, with_targets=True):
    mesh = gen_sphere_mesh(n, make_rng(seed))
    if with_targets:
        mesh.targets = manufactured_field(mesh.coords)
    return mesh


@pytest.fixture
def tiny_model():
    cfg = small_config()
    return cfg, init_params(cfg, seed=1)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Relative Frobenius difference, with b as the reference scale."""
    denom = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / (denom if denom > 0 else 1.0))

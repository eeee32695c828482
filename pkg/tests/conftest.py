import numpy as np
import pytest
import torch

from refavs.model import Dims, init_params, stack_queries
from refavs.synthgen import generate_split

TINY = Dims(d=8, n_heads=2, n_layers=1, n_enc_layers=1, mlp_mult=2, mask_hidden=4)


@pytest.fixture(scope="session")
def train_samples():
    return generate_split(0, "train", 12)


@pytest.fixture(scope="session")
def unseen_samples():
    return generate_split(0, "test_unseen", 8)


@pytest.fixture
def tiny_policy():
    return init_params(3, TINY, "student", dtype=torch.float64)


@pytest.fixture
def tiny_batch(train_samples):
    return stack_queries([s.query for s in train_samples[:4]], dtype=torch.float64)


def random_masks(rng, shape, n):
    """Pairs of random boolean masks with varied densities."""
    out = []
    for _ in range(n):
        p, q = rng.uniform(0.05, 0.95, size=2)
        out.append((rng.random(shape) < p, rng.random(shape) < q))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def relative_error(fn, param, h=1e-4, n_coords=24, seed=0):
    """Norm-relative gap between autograd and central differences on sampled coordinates."""
    param.grad = None
    fn().backward()
    analytic = param.grad.detach().reshape(-1).clone()
    flat = param.data.view(-1)
    idx = np.random.default_rng(seed).choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    num, ana = [], []
    with torch.no_grad():
        for i in idx:
            old = flat[i].item()
            flat[i] = old + h
            up = fn().item()
            flat[i] = old - h
            down = fn().item()
            flat[i] = old
            num.append((up - down) / (2 * h))
            ana.append(analytic[i].item())
    num, ana = np.array(num), np.array(ana)
    return np.linalg.norm(num - ana) / max(np.linalg.norm(num) + np.linalg.norm(ana), 1e-12)

import numpy as np
import pytest

from funcdag.core import (
    FunctionalDataset,
    ModelParams,
    ProblemShape,
    default_mask,
    zero_blocks,
)


def orthonormal(rng, T, K):
    Q, R = np.linalg.qr(rng.standard_normal((T, K)))
    return Q * np.sign(np.diag(R))


def random_acyclic_params(rng, P=3, Lmax=2, Kmax=2, T=8, N=4, scale=0.5, density=0.6):
    """Random model with an acyclic transition support (edges follow a random
    permutation), suitable for exercising both E-step routes."""
    L = tuple(int(rng.integers(1, Lmax + 1)) for _ in range(P))
    K = tuple(int(rng.integers(1, Kmax + 1)) for _ in range(P))
    shape = ProblemShape(P=P, L=L, K=K, T=T, N=N)
    order = rng.permutation(P)
    CL, CK = zero_blocks(shape)
    for a in range(P):
        for b in range(a + 1, P):
            if rng.random() < density:
                i, j = int(order[a]), int(order[b])
                CL[(i, j)] = scale * rng.standard_normal((L[i], L[j]))
                CK[(i, j)] = scale * rng.standard_normal((K[i], K[j]))
    B = tuple(orthonormal(rng, T, K[j]) for j in range(P))
    r2 = rng.uniform(0.05, 0.4, size=shape.total_L)
    return ModelParams(shape=shape, CL=CL, CK=CK, B=B, r2=r2, omega2=float(rng.uniform(0.5, 1.5)))


def random_dataset(rng, shape):
    values = tuple(rng.standard_normal((shape.N, shape.L[j], shape.T)) for j in range(shape.P))
    return FunctionalDataset(shape=shape, values=values, grid=np.linspace(0, 1, shape.T))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

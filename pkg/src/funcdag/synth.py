"""Synthetic benchmark generator: Erdos-Renyi DAGs, Fourier bases,
rank-one-by-identity transition blocks, and ancestral sampling of the
functional observations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    FunctionalDataset,
    ModelParams,
    ProblemShape,
    assemble_C,
    default_mask,
    normalize_ck,
    zero_blocks,
)

__all__ = ["SynthConfig", "GroundTruth", "sample_er_dag", "fourier_basis", "generate_dataset"]


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings.  Edge coefficients c are drawn with magnitude
    uniform in [coef_low, coef_high] and random sign; each edge block is
    C_ij = c * ones(L_i, L_j) (x) I_K."""

    shape: ProblemShape
    edge_prob: float = 0.4
    coef_low: float = 0.5
    coef_high: float = 2.0
    omega2_true: float = 1.0
    r2_true: float = 0.01
    seed: int = 0
    mask: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValueError("edge_prob must be in [0, 1]")
        if not 0 < self.coef_low < self.coef_high:
            raise ValueError("need 0 < coef_low < coef_high")
        if self.omega2_true < 0 or self.r2_true < 0:
            raise ValueError("variances must be >= 0")


@dataclass(frozen=True)
class GroundTruth:
    params_true: ModelParams            # raw blocks as generated (CK = I_K)
    params_true_normalized: ModelParams  # unit-norm CK, scale folded into CL
    adjacency_true: np.ndarray          # (P, P) bool
    order: tuple[int, ...]              # topological permutation used
    latents: np.ndarray                 # (N, M) true coefficient rows


def sample_er_dag(P: int, edge_prob: float, rng: np.random.Generator):
    """Erdos-Renyi DAG: draw a uniform topological order, then include each
    order-respecting pair independently with probability edge_prob."""
    if P < 1:
        raise ValueError("P must be >= 1")
    order = rng.permutation(P)
    adj = np.zeros((P, P), dtype=bool)
    for a in range(P):
        for b in range(a + 1, P):
            if rng.random() < edge_prob:
                adj[order[a], order[b]] = True
    return adj, tuple(int(v) for v in order)


def fourier_basis(T: int, K: int) -> np.ndarray:
    """Fourier basis evaluated on the grid, orthonormalized.

    Raw columns: constant, then cos(2 pi u t) and sin(2 pi u t) for
    u = 1, 2, ...; a thin QR (R diagonal forced positive) makes the columns
    exactly orthonormal at the discrete level.
    """
    if not K < T:
        raise ValueError("need K < T")
    t = np.linspace(0.0, 1.0, T)
    cols = []
    for k in range(1, K + 1):
        if k == 1:
            cols.append(np.ones(T))
        elif k % 2 == 0:
            u = k // 2
            cols.append(np.cos(2 * np.pi * u * t))
        else:
            u = (k - 1) // 2
            cols.append(np.sin(2 * np.pi * u * t))
    raw = np.column_stack(cols)
    Q, R = np.linalg.qr(raw)
    return Q * np.sign(np.diag(R))


def fourier_basis_raw(T: int, K: int) -> np.ndarray:
    """Unnormalized Fourier columns on the grid (testing hook)."""
    t = np.linspace(0.0, 1.0, T)
    cols = [np.ones(T)]
    for k in range(2, K + 1):
        u = k // 2
        cols.append(np.cos(2 * np.pi * u * t) if k % 2 == 0 else np.sin(2 * np.pi * u * t))
    return np.column_stack(cols)


def generate_dataset(cfg: SynthConfig) -> tuple[FunctionalDataset, GroundTruth]:
    """Sample a dataset from the generative model.

    Latent rows solve x (I - C) = xi with xi ~ N(0, omega2 I); observations
    are Y_jl = B_j x_jl + observation noise on the shared grid.
    """
    sh = cfg.shape
    rng = np.random.default_rng(cfg.seed)
    allowed = default_mask(sh.P) if cfg.mask is None else (np.asarray(cfg.mask, bool) & default_mask(sh.P))

    adj, order = sample_er_dag(sh.P, cfg.edge_prob, rng)
    adj &= allowed
    CL, CK = zero_blocks(sh, allowed)
    for i in range(sh.P):
        for j in range(sh.P):
            if adj[i, j]:
                mag = rng.uniform(cfg.coef_low, cfg.coef_high)
                sign = 1.0 if rng.random() < 0.5 else -1.0
                CL[(i, j)] = sign * mag * np.ones((sh.L[i], sh.L[j]))
                CK[(i, j)] = np.eye(sh.K[i], sh.K[j])

    B = tuple(fourier_basis(sh.T, sh.K[j]) for j in range(sh.P))
    params = ModelParams(
        shape=sh,
        CL=CL,
        CK=CK,
        B=B,
        r2=np.full(sh.total_L, cfg.r2_true),
        omega2=max(cfg.omega2_true, 1e-300),
        mask=allowed,
    )

    C = assemble_C(params)
    A = np.eye(sh.M) - C
    xi = np.sqrt(cfg.omega2_true) * rng.standard_normal((sh.N, sh.M))
    X = np.linalg.solve(A.T, xi.T).T  # rows satisfy x (I - C) = xi

    grid = np.linspace(0.0, 1.0, sh.T)
    values = []
    for j in range(sh.P):
        Yj = np.empty((sh.N, sh.L[j], sh.T))
        for l in range(sh.L[j]):
            mean = X[:, sh.func_slice(j, l)] @ B[j].T
            Yj[:, l, :] = mean + np.sqrt(cfg.r2_true) * rng.standard_normal((sh.N, sh.T))
        values.append(Yj)

    data = FunctionalDataset(shape=sh, values=tuple(values), grid=grid)
    truth = GroundTruth(
        params_true=params,
        params_true_normalized=normalize_ck(params),
        adjacency_true=adj,
        order=order,
        latents=X,
    )
    return data, truth

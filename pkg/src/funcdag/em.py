"""Regularized EM: initialization, alternating E/M steps, and convergence
by parameter distance."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    BlockAdjacency,
    FunctionalDataset,
    ModelParams,
    ProblemShape,
    assemble_C,
    assemble_blocks,
    compute_W,
    default_mask,
    param_distance,
    zero_blocks,
)
from .inference import expected_complete_loglik, ffbs_posterior, posterior_direct
from .mstep import SolverConfig, group_norm, notears_h, solve_C, update_basis, update_omega, update_r

__all__ = ["FitConfig", "FitReport", "initialize", "fit"]


@dataclass(frozen=True)
class FitConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    eps0: float = 1e-4
    max_em_iter: int = 200
    seed: int = 0
    estep: str = "direct"  # "direct" | "ffbs"

    def __post_init__(self):
        if not self.eps0 > 0:
            raise ValueError("eps0 must be > 0")
        if self.max_em_iter < 1:
            raise ValueError("max_em_iter must be >= 1")
        if self.estep not in ("direct", "ffbs"):
            raise ValueError("estep must be 'direct' or 'ffbs'")


@dataclass
class FitReport:
    params: ModelParams
    W: BlockAdjacency
    iterations: int
    d_history: list[float]
    h_final: float
    q_history: list[float]          # Q(theta_s ; theta_{s-1}) per iteration
    converged: bool
    ascent_history: list[float] = field(default_factory=list)  # penalized Q gain per iteration
    warnings: list[str] = field(default_factory=list)
    solver_trace: list[tuple] = field(default_factory=list)  # last C-solve trace


def _orthonormal_columns(rng: np.random.Generator, T: int, K: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((T, K)))
    return Q * np.sign(np.diag(R))


def initialize(
    data: FunctionalDataset,
    shape: ProblemShape,
    seed: int = 0,
    mask: np.ndarray | None = None,
) -> ModelParams:
    """Starting parameters: per-node functional PCA for the bases, zero
    transition blocks, unit latent variance, and projection residuals for the
    observation variances."""
    rng = np.random.default_rng(seed)
    B = []
    r2 = np.empty(shape.total_L)
    for j in range(shape.P):
        stacked = data.values[j].reshape(shape.N * shape.L[j], shape.T).T  # (T, N*L_j)
        if not np.any(stacked):
            Bj = _orthonormal_columns(rng, shape.T, shape.K[j])
        else:
            U, s, _ = np.linalg.svd(stacked, full_matrices=False)
            Bj = U[:, : shape.K[j]]
            if Bj.shape[1] < shape.K[j]:  # fewer columns than K_j available
                extra = _orthonormal_columns(rng, shape.T, shape.K[j])
                Bj = np.linalg.qr(np.hstack([Bj, extra]))[0][:, : shape.K[j]]
        B.append(Bj)
        proj = Bj @ Bj.T
        for l in range(shape.L[j]):
            Y = data.values[j][:, l, :]
            resid = Y - Y @ proj.T
            r2[shape.r_index(j, l)] = float(np.mean(resid**2))
    CL, CK = zero_blocks(shape, mask)
    return ModelParams(
        shape=shape, CL=CL, CK=CK, B=tuple(B), r2=r2, omega2=1.0, mask=mask
    )


def _run_estep(data: FunctionalDataset, params: ModelParams, estep: str):
    if estep == "direct":
        return posterior_direct(data, params)
    W = compute_W(params)
    order = _topological_order(W.W)
    return ffbs_posterior(data, params, order)


def _topological_order(W: np.ndarray) -> list[int]:
    """Topological sort of the nonzero support; fails on cyclic supports."""
    P = W.shape[0]
    adj = W != 0
    indeg = adj.sum(axis=0)
    frontier = sorted(np.flatnonzero(indeg == 0).tolist())
    order: list[int] = []
    indeg = indeg.copy()
    while frontier:
        v = frontier.pop(0)
        order.append(v)
        for w in np.flatnonzero(adj[v]):
            indeg[w] -= 1
            if indeg[w] == 0:
                frontier.append(int(w))
        frontier.sort()
    if len(order) != P:
        raise ValueError(
            "transition support contains a cycle; the FFBS E-step needs an "
            "exactly acyclic support (use estep='direct' or a positive lam)"
        )
    return order


def fit(
    data: FunctionalDataset,
    cfg: FitConfig,
    mask: np.ndarray | None = None,
    init_params: ModelParams | None = None,
) -> FitReport:
    """Run the EM loop: E-step posterior, basis update, noise update,
    constrained transition solve, latent-variance update, until the parameter
    distance falls below eps0."""
    shape = data.shape
    mask = default_mask(shape.P) if mask is None else (np.asarray(mask, bool) & default_mask(shape.P))
    params = init_params if init_params is not None else initialize(data, shape, cfg.seed, mask)
    if init_params is not None and not np.array_equal(params.mask, mask):
        params = replace(params, mask=mask)

    d_history: list[float] = []
    q_history: list[float] = []
    ascent_history: list[float] = []
    warnings: list[str] = []
    converged = False
    iterations = 0
    last_trace: list[tuple] = []

    for s in range(1, cfg.max_em_iter + 1):
        iterations = s
        try:
            post = _run_estep(data, params, cfg.estep)
        except (ValueError, FloatingPointError) as e:
            raise RuntimeError(f"E-step failed at EM iteration {s}: {e}") from e

        pen_old = expected_complete_loglik(data, params, post) - cfg.solver.lam * group_norm(
            params.CL, params.CK
        )

        B_new = update_basis(data, post, shape)
        kept = []
        for j, Bj in enumerate(B_new):
            if Bj is None:
                kept.append(j)
                B_new[j] = params.B[j]
        if kept:
            warnings.append(f"iteration {s}: degenerate basis update, kept nodes {kept}")

        r_new = update_r(data, post, B_new, shape)

        try:
            sol = solve_C(post, shape, cfg.solver, mask=mask, CL0=params.CL, CK0=params.CK)
        except FloatingPointError as e:
            raise RuntimeError(f"C solver failed at EM iteration {s}: {e}") from e
        warnings.extend(f"iteration {s}: {w}" for w in sol.warnings)
        last_trace = sol.trace

        C_new = assemble_blocks(sol.CL, sol.CK, shape)
        omega_new = update_omega(post, C_new)

        new_params = ModelParams(
            shape=shape,
            CL=sol.CL,
            CK=sol.CK,
            B=tuple(B_new),
            r2=r_new,
            omega2=max(omega_new, 1e-12),
            mask=mask,
        )

        q_new = expected_complete_loglik(data, new_params, post)
        q_history.append(q_new)
        ascent_history.append(
            (q_new - cfg.solver.lam * group_norm(sol.CL, sol.CK)) - pen_old
        )

        d = param_distance(new_params, params)
        d_history.append(d)
        params = new_params
        if d < cfg.eps0:
            converged = True
            break

    W = compute_W(params)
    h_final, _ = notears_h(W.W)
    return FitReport(
        params=params,
        W=W,
        iterations=iterations,
        d_history=d_history,
        h_final=h_final,
        q_history=q_history,
        converged=converged,
        ascent_history=ascent_history,
        warnings=warnings,
        solver_trace=last_trace,
    )


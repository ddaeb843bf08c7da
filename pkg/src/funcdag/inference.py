"""E-step: exact Gaussian posterior of the latent coefficients.

Two routes compute the same posterior.  ``posterior_direct`` conditions the
joint Gaussian in one shot and is valid for any invertible (I - C), so it is
the canonical path during EM.  ``ffbs_posterior`` runs forward filtering and
backward smoothing over the node DAG with explicit noise-coefficient
bookkeeping (matrices G for the latent noise and H for the observation
noise); it requires an exactly acyclic transition structure and serves as an
independent cross-check of the direct route.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import FunctionalDataset, ModelParams, PosteriorSummary, ProblemShape, assemble_C

__all__ = [
    "ObservationOperator",
    "prior_covariance",
    "posterior_direct",
    "ffbs_posterior",
    "expected_complete_loglik",
    "R_FLOOR",
    "OMEGA_FLOOR",
]

# Variance floors applied before any inversion; closed-form M-step updates can
# return exactly zero on noise-free synthetic data.
R_FLOOR = 1e-8
OMEGA_FLOOR = 1e-10


@dataclass(frozen=True)
class ObservationOperator:
    """Stacked linear map from the latent vector to all observations.

    H is (sum_j L_j * T) x M with one B_j block per (j, l) row group and
    zeros elsewhere; Rdiag holds r_jl^2 repeated over the T grid points of
    each (j, l) row group.
    """

    H: np.ndarray
    Rdiag: np.ndarray

    @classmethod
    def from_params(cls, params: ModelParams) -> "ObservationOperator":
        sh = params.shape
        rows = sh.total_L * sh.T
        H = np.zeros((rows, sh.M))
        Rdiag = np.empty(rows)
        for j, l in sh.func_pairs():
            r0 = sh.r_index(j, l) * sh.T
            H[r0:r0 + sh.T, sh.func_slice(j, l)] = params.B[j]
            Rdiag[r0:r0 + sh.T] = max(params.r2[sh.r_index(j, l)], R_FLOOR)
        return cls(H=H, Rdiag=Rdiag)


def stack_observations(data: FunctionalDataset) -> np.ndarray:
    """All samples as rows of the stacked (j, l, t) observation vector."""
    sh = data.shape
    return np.concatenate([data.values[j].reshape(sh.N, -1) for j in range(sh.P)], axis=1)


def prior_covariance(C: np.ndarray, omega2: float) -> np.ndarray:
    """Marginal covariance of the latent rows, (I-C)^-T (omega2 I) (I-C)^-1.

    Raises ValueError when (I - C) is numerically singular, which happens for
    cyclic or otherwise degenerate transition matrices.
    """
    M = C.shape[0]
    A = np.eye(M) - C
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1.0):
        raise ValueError("cyclic or degenerate transition matrix: (I - C) is singular")
    Ainv = np.linalg.inv(A)
    Sx = max(omega2, OMEGA_FLOOR) * Ainv.T @ Ainv
    return 0.5 * (Sx + Sx.T)


def _posterior_precision(params: ModelParams) -> np.ndarray:
    """Sigma_x^{-1} + H^T R^{-1} H, using (I-C)(I-C)^T / omega2 for the prior
    precision so no inverse of (I - C) is formed."""
    sh = params.shape
    C = assemble_C(params)
    A = np.eye(sh.M) - C
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] <= 1e-12 * max(s[0], 1.0):
        raise ValueError("cyclic or degenerate transition matrix: (I - C) is singular")
    prec = A @ A.T / max(params.omega2, OMEGA_FLOOR)
    for j, l in sh.func_pairs():
        r = max(params.r2[sh.r_index(j, l)], R_FLOOR)
        sl = sh.func_slice(j, l)
        prec[sl, sl] += params.B[j].T @ params.B[j] / r
    return prec


def posterior_direct(data: FunctionalDataset, params: ModelParams) -> PosteriorSummary:
    """Posterior by joint-Gaussian conditioning.

    sigma_hat = (Sigma_x^{-1} + H^T R^{-1} H)^{-1} shared across samples;
    u_hat[n] = sigma_hat H^T R^{-1} y[n], linear in the observations.
    """
    sh = data.shape
    prec = _posterior_precision(params)
    # H^T R^{-1} y for all samples at once: one B_j^T projection per (j, l)
    rhs = np.zeros((sh.M, sh.N))
    for j, l in sh.func_pairs():
        r = max(params.r2[sh.r_index(j, l)], R_FLOOR)
        Y = data.values[j][:, l, :]  # (N, T)
        rhs[sh.func_slice(j, l), :] = params.B[j].T @ Y.T / r
    try:
        cho = scipy.linalg.cho_factor(prec, lower=True)
    except np.linalg.LinAlgError as e:  # pragma: no cover - upstream failure
        raise ValueError(f"posterior precision is not positive definite: {e}") from e
    sigma = scipy.linalg.cho_solve(cho, np.eye(sh.M))
    sigma = 0.5 * (sigma + sigma.T)
    u = scipy.linalg.cho_solve(cho, rhs).T  # (N, M)
    return PosteriorSummary(u_hat=u, sigma_hat=sigma)


# ---------------------------------------------------------------------------
# Forward filtering / backward smoothing
# ---------------------------------------------------------------------------

def _check_order(params: ModelParams, order) -> list[int]:
    P = params.shape.P
    order = [int(v) for v in order]
    if sorted(order) != list(range(P)):
        raise ValueError("order must be a permutation of the nodes")
    pos = {j: i for i, j in enumerate(order)}
    for (i, j), cl in params.CL.items():
        if not params.mask[i, j]:
            continue
        w = np.linalg.norm(cl) * np.linalg.norm(params.CK[(i, j)])
        if w > 0 and pos[i] >= pos[j]:
            raise ValueError(f"not a valid topological order: edge {i}->{j} violates it")
    return order


def ffbs_posterior(data: FunctionalDataset, params: ModelParams, order) -> PosteriorSummary:
    """Posterior via forward filtering and backward smoothing.

    Every node's state is represented as mean + G xi + H eps, where xi is the
    stacked latent noise and eps the stacked observation noise.  The forward
    sweep walks the topological order: each node's prior extends its parents'
    filtered representations (u_j = sum C_kj^T u_k, same for G and H, plus
    the node's own identity block in G), and each observation's Kalman update
    is applied to the representations of all nodes processed so far.  That
    full write-back is what makes the filtered means exact posterior means on
    general DAGs; updating only the observed block - exact for chains of
    univariate-function nodes, where the recursion reduces to the classical
    RTS smoother - provably loses sibling and within-node information (see
    the direct-conditioning cross-check in the tests).  The backward sweep
    then conditions each node on all downstream nodes jointly; its
    corrections vanish identically, and the posterior covariance is read off
    the final bookkeeping as omega2 G G^T + H diag(r) H^T.
    """
    sh = data.shape
    order = _check_order(params, order)
    M = sh.M
    LT = sh.total_L * sh.T
    omega2 = max(params.omega2, OMEGA_FLOOR)
    rvec = np.repeat(np.maximum(params.r2, R_FLOOR), sh.T)  # (LT,) obs-noise diag

    C = assemble_C(params)
    parents = {
        j: [i for i in range(sh.P) if i != j and np.any(C[sh.node_slice(i), sh.node_slice(j)])]
        for j in range(sh.P)
    }

    u: dict[int, np.ndarray] = {}  # (N, m_j) filtered means
    G: dict[int, np.ndarray] = {}  # (m_j, M) latent-noise coefficients
    H: dict[int, np.ndarray] = {}  # (m_j, LT) observation-noise coefficients
    processed: list[int] = []

    for j in order:
        m = sh.node_size(j)
        # prior extension from filtered parents
        uj = np.zeros((sh.N, m))
        Gj = np.zeros((m, M))
        Gj[:, sh.node_slice(j)] = np.eye(m)
        Hj = np.zeros((m, LT))
        for k in parents[j]:
            Ckj = C[sh.node_slice(k), sh.node_slice(j)]
            uj += u[k] @ Ckj
            Gj += Ckj.T @ G[k]
            Hj += Ckj.T @ H[k]
        u[j], G[j], H[j] = uj, Gj, Hj
        processed.append(j)

        # condition on this node's own observations, one function at a time
        Bj = params.B[j]
        for l in range(sh.L[j]):
            sl = slice(l * sh.K[j], (l + 1) * sh.K[j])
            Gjl, Hjl = G[j][sl], H[j][sl]
            r = max(params.r2[sh.r_index(j, l)], R_FLOOR)
            Sjl = omega2 * Gjl @ Gjl.T + (Hjl * rvec) @ Hjl.T
            S = Bj @ Sjl @ Bj.T + r * np.eye(sh.T)
            innov = data.values[j][:, l, :] - u[j][:, sl] @ Bj.T  # (N, T)
            # noise coefficients of the observation itself
            BG = Bj @ Gjl  # (T, M)
            BH = Bj @ Hjl  # (T, LT)
            BH = BH.copy()
            e0 = sh.r_index(j, l) * sh.T
            BH[:, e0:e0 + sh.T] += np.eye(sh.T)
            Sinv = np.linalg.inv(0.5 * (S + S.T))
            for mnode in processed:
                cross = omega2 * G[mnode] @ BG.T + (H[mnode] * rvec) @ BH.T
                gain = cross @ Sinv  # (m_m, T)
                u[mnode] = u[mnode] + innov @ gain.T
                G[mnode] = G[mnode] - gain @ BG
                H[mnode] = H[mnode] - gain @ BH

    # backward smoothing: condition each node on all downstream nodes jointly
    uh = {j: u[j] for j in order}
    Gh = {j: G[j].copy() for j in order}
    Hh = {j: H[j].copy() for j in order}
    for idx in range(sh.P - 2, -1, -1):
        k = order[idx]
        de = order[idx + 1:]
        Gde = np.vstack([G[d] for d in de])
        Hde = np.vstack([H[d] for d in de])
        dG = Gde - np.vstack([Gh[d] for d in de])
        dH = Hde - np.vstack([Hh[d] for d in de])
        du = np.hstack([uh[d] - u[d] for d in de])
        if not (np.any(dG) or np.any(dH) or np.any(du)):
            continue  # downstream already fully informed: zero correction
        S_k_de = omega2 * G[k] @ Gde.T + (H[k] * rvec) @ Hde.T
        S_de = omega2 * Gde @ Gde.T + (Hde * rvec) @ Hde.T
        J = S_k_de @ np.linalg.pinv(S_de)
        uh[k] = u[k] + du @ J.T
        Gh[k] = G[k] - J @ dG
        Hh[k] = H[k] - J @ dH

    Gfull = np.vstack([Gh[j] for j in range(sh.P)])
    Hfull = np.vstack([Hh[j] for j in range(sh.P)])
    sigma = omega2 * Gfull @ Gfull.T + (Hfull * rvec) @ Hfull.T
    u_hat = np.hstack([uh[j] for j in range(sh.P)])
    return PosteriorSummary(u_hat=u_hat, sigma_hat=0.5 * (sigma + sigma.T))


# ---------------------------------------------------------------------------
# Expected complete log-likelihood
# ---------------------------------------------------------------------------

def expected_complete_loglik(
    data: FunctionalDataset, params: ModelParams, post: PosteriorSummary
) -> float:
    """E[log f(X, Y; params)] under the posterior, up to additive constants.

    Both quadratic forms are taken in closed form: the observation term uses
    ||Y - B u||^2 + tr(B Sigma_jl B^T) per (j, l), the latent term
    ||u (I-C)||^2 + tr((I-C)^T Sigma (I-C)) per sample.
    """
    sh = data.shape
    if post.u_hat.shape != (sh.N, sh.M):
        raise ValueError("posterior means do not match the data shape")
    total = 0.0
    for j, l in sh.func_pairs():
        r = max(params.r2[sh.r_index(j, l)], R_FLOOR)
        Bj = params.B[j]
        Y = data.values[j][:, l, :]
        U = post.u_hat[:, sh.func_slice(j, l)]
        resid = float(np.sum((Y - U @ Bj.T) ** 2))
        Sjl = post.sigma_hat[sh.func_slice(j, l), sh.func_slice(j, l)]
        resid += sh.N * float(np.trace(Bj @ Sjl @ Bj.T))
        total += resid / r + sh.N * sh.T * np.log(r)
    A = np.eye(sh.M) - assemble_C(params)
    omega2 = max(params.omega2, OMEGA_FLOOR)
    quad = float(np.sum((post.u_hat @ A) ** 2))
    quad += sh.N * float(np.trace(A.T @ post.sigma_hat @ A))
    total += quad / omega2 + sh.N * sh.M * np.log(omega2)
    return -0.5 * total

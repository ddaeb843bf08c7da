"""Evaluation: directed-edge metrics, orthogonal alignment of estimated
parameters to ground truth, aligned transition error, and reconstruction
diagnostics."""

from __future__ import annotations

import numpy as np

from .core import FunctionalDataset, ModelParams, assemble_C
from .inference import posterior_direct
from .synth import GroundTruth

__all__ = [
    "threshold_edges",
    "edge_metrics",
    "procrustes_align",
    "aligned_c_error",
    "mse_diagnostics",
]


def threshold_edges(W: np.ndarray, w_threshold: float) -> np.ndarray:
    return np.asarray(W) > w_threshold


def edge_metrics(adj_est: np.ndarray, adj_true: np.ndarray) -> dict:
    """Directed-edge precision/recall/F1 plus the structural Hamming distance.

    F1 is defined as 0 when precision + recall = 0.  SHD counts missing and
    extra edges, with a reversed pair counted once.
    """
    A = np.asarray(adj_est, dtype=bool)
    B = np.asarray(adj_true, dtype=bool)
    if A.shape != B.shape or A.shape[0] != A.shape[1]:
        raise ValueError("adjacency matrices must be square and same shape")
    np.fill_diagonal(A := A.copy(), False)
    np.fill_diagonal(B := B.copy(), False)
    tp = int(np.sum(A & B))
    fp = int(np.sum(A & ~B))
    fn = int(np.sum(~A & B))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    # SHD: reversal = est has (i,j), truth has (j,i); counts once
    reversed_pairs = int(np.sum(A & ~B & B.T & ~A.T))
    extra = fp - reversed_pairs
    missing = fn - reversed_pairs
    shd = extra + missing + reversed_pairs
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "shd": shd,
        "tp": tp,
        "fp": fp,
        "fn": fn,
    }


def procrustes_align(B_est, B_true) -> list[np.ndarray]:
    """Per-node orthogonal K_j x K_j matrices Q_j minimizing
    ||B_est_j Q - B_true_j||_F (polar factor of B_est_j^T B_true_j)."""
    out = []
    for Be, Bt in zip(B_est, B_true):
        if Be.shape != Bt.shape:
            raise ValueError("basis shapes differ")
        U, _, Vt = np.linalg.svd(Be.T @ Bt)
        out.append(U @ Vt)
    return out


def aligned_c_error(params_est: ModelParams, params_true: ModelParams) -> float:
    """Squared Frobenius distance between the rotation-aligned estimated
    transition matrix and the true one.

    The estimated CK block of edge j -> k is replaced by Q_j^T CK_jk Q_k with
    Q from the Procrustes alignment of the bases, which maps the estimate
    into the true model's coordinate frame.
    """
    if params_est.shape.P != params_true.shape.P or params_est.shape.K != params_true.shape.K:
        raise ValueError("estimated and true shapes do not match")
    if params_est.shape.L != params_true.shape.L:
        raise ValueError("estimated and true shapes do not match")
    Q = procrustes_align(params_est.B, params_true.B)
    sh = params_est.shape
    C_tilde = np.zeros((sh.M, sh.M))
    for (j, k), cl in params_est.CL.items():
        if not params_est.mask[j, k]:
            continue
        ck_rot = Q[j].T @ params_est.CK[(j, k)] @ Q[k]
        C_tilde[sh.node_slice(j), sh.node_slice(k)] = np.kron(cl, ck_rot)
    diff = C_tilde - assemble_C(params_true)
    return float(np.sum(diff * diff))


def mse_diagnostics(
    data: FunctionalDataset,
    params_est: ModelParams,
    ground_truth: GroundTruth | None = None,
) -> dict:
    """Reconstruction error of the fitted model (posterior expectation of
    ||Y - B x||^2 / (N L T)) against the same error of the true model at the
    true latents.  mse_true is None when ground-truth latents are missing."""
    sh = data.shape
    post = posterior_direct(data, params_est)
    total = 0.0
    for j, l in sh.func_pairs():
        Bj = params_est.B[j]
        Y = data.values[j][:, l, :]
        U = post.u_hat[:, sh.func_slice(j, l)]
        total += float(np.sum((Y - U @ Bj.T) ** 2))
        Sjl = post.sigma_hat[sh.func_slice(j, l), sh.func_slice(j, l)]
        total += sh.N * float(np.trace(Bj @ Sjl @ Bj.T))
    denom = sh.N * sh.total_L * sh.T
    mse_est = total / denom

    mse_true = None
    if ground_truth is not None and ground_truth.latents is not None:
        pt = ground_truth.params_true
        X = ground_truth.latents
        tot = 0.0
        for j, l in sh.func_pairs():
            Y = data.values[j][:, l, :]
            mean = X[:, sh.func_slice(j, l)] @ pt.B[j].T
            tot += float(np.sum((Y - mean) ** 2))
        mse_true = tot / denom

    delta = abs(mse_est - mse_true) if mse_true is not None else None
    return {"mse_est": mse_est, "mse_true": mse_true, "delta": delta}

"""Core domain types: problem dimensions, datasets, model parameters, and the
block-structured transition matrix.

The latent vector of one sample stacks all nodes' basis coefficients
node-major: within node j, entry ``l * K_j + k`` is coefficient k of
function l.  The transition matrix C is an M x M matrix whose (i, j) block
(rows = source node i, columns = target node j) is the Kronecker product
``CL[i, j] (x) CK[i, j]``; samples follow the row convention ``x = x C + xi``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ProblemShape",
    "FunctionalDataset",
    "ModelParams",
    "BlockAdjacency",
    "PosteriorSummary",
    "assemble_C",
    "compute_W",
    "param_distance",
    "normalize_ck",
    "default_mask",
    "params_to_json_dict",
    "params_from_json_dict",
    "dumps_model",
    "loads_model",
]

ORTHO_TOL = 1e-8


# ---------------------------------------------------------------------------
# Shapes and index layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemShape:
    """Dimensions of one problem instance.

    P nodes; node j carries L[j] functions, each expanded on K[j] basis
    functions and observed on a common grid of T points in [0, 1]; N samples.
    """

    P: int
    L: tuple[int, ...]
    K: tuple[int, ...]
    T: int
    N: int

    def __post_init__(self):
        object.__setattr__(self, "L", tuple(int(v) for v in self.L))
        object.__setattr__(self, "K", tuple(int(v) for v in self.K))
        if self.P < 1:
            raise ValueError("P must be >= 1")
        if len(self.L) != self.P or len(self.K) != self.P:
            raise ValueError("L and K must have one entry per node")
        if any(l < 1 for l in self.L) or any(k < 1 for k in self.K):
            raise ValueError("all L_j and K_j must be >= 1")
        if self.T < 1 or self.N < 1:
            raise ValueError("T and N must be >= 1")
        if any(k >= self.T for k in self.K):
            raise ValueError("each K_j must be smaller than the grid length T")

    @property
    def M(self) -> int:
        """Total latent dimension, sum_j L_j * K_j."""
        return sum(l * k for l, k in zip(self.L, self.K))

    @property
    def total_L(self) -> int:
        return sum(self.L)

    def node_size(self, j: int) -> int:
        return self.L[j] * self.K[j]

    def node_offset(self, j: int) -> int:
        return sum(self.L[i] * self.K[i] for i in range(j))

    def node_slice(self, j: int) -> slice:
        off = self.node_offset(j)
        return slice(off, off + self.node_size(j))

    def func_slice(self, j: int, l: int) -> slice:
        """Latent slice of function l of node j (the K_j coefficients)."""
        off = self.node_offset(j) + l * self.K[j]
        return slice(off, off + self.K[j])

    def r_index(self, j: int, l: int) -> int:
        """Position of (j, l) in the flat per-function ordering."""
        return sum(self.L[i] for i in range(j)) + l

    def func_pairs(self):
        """Iterate (j, l) over all functions in flat order."""
        for j in range(self.P):
            for l in range(self.L[j]):
                yield j, l


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FunctionalDataset:
    """Discretized functional observations.

    values[j] has shape (N, L_j, T): sample n, function l of node j, grid
    point t.  The grid is shared by all nodes and equally spaced in [0, 1].
    """

    shape: ProblemShape
    values: tuple[np.ndarray, ...]
    grid: np.ndarray

    def __post_init__(self):
        sh = self.shape
        vals = tuple(_freeze(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "grid", _freeze(self.grid))
        if len(vals) != sh.P:
            raise ValueError("values must have one array per node")
        for j, v in enumerate(vals):
            if v.shape != (sh.N, sh.L[j], sh.T):
                raise ValueError(
                    f"node {j}: expected shape {(sh.N, sh.L[j], sh.T)}, got {v.shape}"
                )
            if not np.all(np.isfinite(v)):
                raise ValueError(f"node {j}: non-finite observation values")
        if self.grid.shape != (sh.T,):
            raise ValueError("grid length must equal T")
        if sh.T > 1:
            d = np.diff(self.grid)
            if np.any(d <= 0):
                raise ValueError("grid must be strictly increasing")
            if not np.allclose(d, d[0], rtol=1e-9, atol=1e-12):
                raise ValueError("grid must be equally spaced")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def default_mask(P: int) -> np.ndarray:
    """All edges allowed except self-loops."""
    return ~np.eye(P, dtype=bool)


@dataclass(frozen=True)
class ModelParams:
    """Learnable model state.

    CL[(i, j)] is L_i x L_j, CK[(i, j)] is K_i x K_j, for every allowed
    ordered pair i != j; B[j] is T x K_j with orthonormal columns; r2 is the
    flat per-(j, l) observation variance; omega2 the shared latent variance.
    mask marks which blocks may be nonzero (diagonal always forbidden).
    """

    shape: ProblemShape
    CL: dict[tuple[int, int], np.ndarray]
    CK: dict[tuple[int, int], np.ndarray]
    B: tuple[np.ndarray, ...]
    r2: np.ndarray
    omega2: float
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        sh = self.shape
        mask = self.mask if self.mask is not None else default_mask(sh.P)
        mask = np.asarray(mask, dtype=bool) & default_mask(sh.P)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        if mask.shape != (sh.P, sh.P):
            raise ValueError("mask must be P x P")
        CL = {k: _freeze(v) for k, v in self.CL.items()}
        CK = {k: _freeze(v) for k, v in self.CK.items()}
        object.__setattr__(self, "CL", CL)
        object.__setattr__(self, "CK", CK)
        object.__setattr__(self, "B", tuple(_freeze(b) for b in self.B))
        object.__setattr__(self, "r2", _freeze(self.r2))
        for (i, j), m in CL.items():
            if i == j:
                raise ValueError("diagonal blocks are not allowed")
            if m.shape != (sh.L[i], sh.L[j]):
                raise ValueError(f"CL[{i},{j}] has shape {m.shape}")
        for (i, j), m in CK.items():
            if m.shape != (sh.K[i], sh.K[j]):
                raise ValueError(f"CK[{i},{j}] has shape {m.shape}")
        if set(CL) != set(CK):
            raise ValueError("CL and CK must cover the same block set")
        if len(self.B) != sh.P:
            raise ValueError("need one basis per node")
        for j, b in enumerate(self.B):
            if b.shape != (sh.T, sh.K[j]):
                raise ValueError(f"B[{j}] has shape {b.shape}")
            if np.abs(b.T @ b - np.eye(sh.K[j])).max() > ORTHO_TOL:
                raise ValueError(f"B[{j}] columns are not orthonormal")
        if self.r2.shape != (sh.total_L,):
            raise ValueError("r2 must be flat over (j, l)")
        if np.any(self.r2 < 0):
            raise ValueError("r2 entries must be >= 0")
        if not self.omega2 > 0:
            raise ValueError("omega2 must be > 0")

    def block(self, i: int, j: int) -> np.ndarray:
        """Assembled Kronecker block for edge i -> j (zeros if absent/masked)."""
        sh = self.shape
        if i == j or not self.mask[i, j] or (i, j) not in self.CL:
            return np.zeros((sh.node_size(i), sh.node_size(j)))
        return np.kron(self.CL[(i, j)], self.CK[(i, j)])


def zero_blocks(shape: ProblemShape, mask: np.ndarray | None = None):
    """Zero CL/CK dicts over all allowed ordered pairs."""
    mask = mask if mask is not None else default_mask(shape.P)
    CL, CK = {}, {}
    for i in range(shape.P):
        for j in range(shape.P):
            if i != j and mask[i, j]:
                CL[(i, j)] = np.zeros((shape.L[i], shape.L[j]))
                CK[(i, j)] = np.zeros((shape.K[i], shape.K[j]))
    return CL, CK


# ---------------------------------------------------------------------------
# Adjacency and posterior summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockAdjacency:
    """Scalar edge-weight summary W_ij = ||CL_ij||_F * ||CK_ij||_F plus the
    allowed-edge mask."""

    W: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        P = W.shape[0]
        if W.shape != (P, P) or mask.shape != (P, P):
            raise ValueError("W and mask must be square and same shape")
        if np.any(W < 0):
            raise ValueError("W entries must be nonnegative")
        if np.any(W[~mask] != 0) or np.any(np.diag(W) != 0):
            raise ValueError("W must vanish on masked entries and the diagonal")
        W.setflags(write=False)
        mask = mask & default_mask(P)
        mask.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "mask", mask)

    def edges(self, threshold: float) -> np.ndarray:
        return self.W > threshold


@dataclass(frozen=True)
class PosteriorSummary:
    """Gaussian posterior of the latent coefficients: per-sample means (rows
    of u_hat) and the sample-shared covariance sigma_hat."""

    u_hat: np.ndarray  # (N, M)
    sigma_hat: np.ndarray  # (M, M)

    def __post_init__(self):
        object.__setattr__(self, "u_hat", _freeze(self.u_hat))
        object.__setattr__(self, "sigma_hat", _freeze(self.sigma_hat))
        S = self.sigma_hat
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("sigma_hat must be square")
        if self.u_hat.ndim != 2 or self.u_hat.shape[1] != S.shape[0]:
            raise ValueError("u_hat must be N x M with M matching sigma_hat")
        if np.abs(S - S.T).max() > 1e-8 * max(1.0, np.abs(S).max()):
            raise ValueError("sigma_hat must be symmetric")


# ---------------------------------------------------------------------------
# Block operations
# ---------------------------------------------------------------------------

def assemble_blocks(CL: dict, CK: dict, shape: ProblemShape) -> np.ndarray:
    """Dense M x M matrix with block (i, j) = CL[i,j] (x) CK[i,j]."""
    C = np.zeros((shape.M, shape.M))
    for (i, j), cl in CL.items():
        C[shape.node_slice(i), shape.node_slice(j)] = np.kron(cl, CK[(i, j)])
    return C


def assemble_C(params: ModelParams, mask: np.ndarray | None = None) -> np.ndarray:
    """Assemble the full M x M transition matrix from the Kronecker blocks.

    Blocks outside the mask (or missing from the dicts) are exactly zero.
    """
    sh = params.shape
    mask = params.mask if mask is None else (np.asarray(mask, dtype=bool) & default_mask(sh.P))
    C = np.zeros((sh.M, sh.M))
    for (i, j), cl in params.CL.items():
        if not mask[i, j]:
            continue
        C[sh.node_slice(i), sh.node_slice(j)] = np.kron(cl, params.CK[(i, j)])
    return C


def compute_W(params: ModelParams) -> BlockAdjacency:
    """Edge-weight matrix W_ij = ||CL_ij||_F * ||CK_ij||_F (zero diagonal,
    zero outside the mask).  Equals the Frobenius norm of each assembled
    Kronecker block."""
    P = params.shape.P
    W = np.zeros((P, P))
    for (i, j), cl in params.CL.items():
        if params.mask[i, j]:
            W[i, j] = np.linalg.norm(cl) * np.linalg.norm(params.CK[(i, j)])
    return BlockAdjacency(W=W, mask=params.mask)


def param_distance(a: ModelParams, b: ModelParams) -> float:
    """Distance D(a, b) = sqrt(|dC|_F^2 + |dB|_F^2 + |dr|_2^2 + |d omega2|^2),
    with dC taken on the assembled M x M matrices."""
    if a.shape != b.shape:
        raise ValueError("params have different shapes")
    dC = assemble_C(a) - assemble_C(b)
    d2 = float(np.sum(dC * dC))
    for ba, bb in zip(a.B, b.B):
        d2 += float(np.sum((ba - bb) ** 2))
    d2 += float(np.sum((a.r2 - b.r2) ** 2))
    d2 += float((a.omega2 - b.omega2) ** 2)
    return float(np.sqrt(d2))


def normalize_ck(params: ModelParams) -> ModelParams:
    """Rescale every nonzero CK block to unit Frobenius norm, folding the
    scale into CL.  Leaves the assembled C unchanged; resolves the Kronecker
    scale ambiguity for serialization and comparisons."""
    CL, CK = {}, {}
    for key, ck in params.CK.items():
        nrm = np.linalg.norm(ck)
        if nrm > 0:
            CK[key] = ck / nrm
            CL[key] = params.CL[key] * nrm
        else:
            CK[key] = ck.copy()
            CL[key] = params.CL[key].copy()
    return replace(params, CL=CL, CK=CK)


# ---------------------------------------------------------------------------
# Serialization (single JSON document, matrices row-major nested lists)
# ---------------------------------------------------------------------------

def params_to_json_dict(params: ModelParams) -> dict:
    sh = params.shape
    P = sh.P

    def block_table(d):
        table = [[None] * P for _ in range(P)]
        for (i, j), m in d.items():
            table[i][j] = m.tolist()
        return table

    return {
        "shape": {"P": sh.P, "L": list(sh.L), "K": list(sh.K), "T": sh.T, "N": sh.N},
        "CL": block_table(params.CL),
        "CK": block_table(params.CK),
        "B": [b.tolist() for b in params.B],
        "r2": params.r2.tolist(),
        "omega2": float(params.omega2),
        "mask": params.mask.astype(int).tolist(),
    }


def params_from_json_dict(doc: dict) -> ModelParams:
    s = doc["shape"]
    shape = ProblemShape(P=s["P"], L=tuple(s["L"]), K=tuple(s["K"]), T=s["T"], N=s["N"])
    mask = np.asarray(doc["mask"], dtype=bool)
    CL, CK = {}, {}
    for i in range(shape.P):
        for j in range(shape.P):
            if doc["CL"][i][j] is not None:
                CL[(i, j)] = np.asarray(doc["CL"][i][j], dtype=float)
                CK[(i, j)] = np.asarray(doc["CK"][i][j], dtype=float)
    return ModelParams(
        shape=shape,
        CL=CL,
        CK=CK,
        B=tuple(np.asarray(b, dtype=float) for b in doc["B"]),
        r2=np.asarray(doc["r2"], dtype=float),
        omega2=float(doc["omega2"]),
        mask=mask,
    )


def dumps_model(params: ModelParams, extra: dict | None = None) -> str:
    doc = params_to_json_dict(params)
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=1)


def loads_model(text: str) -> ModelParams:
    return params_from_json_dict(json.loads(text))

"""On-disk formats: dataset directories, model JSON, and metrics files.

A dataset directory holds manifest.json ({P, L, T, N, grid, has_truth}),
data.csv in long format (sample,node,function,time_index,value with 0-based
indices), adjacency.csv (P rows of comma-separated 0/1), and, when ground
truth is present, truth_params.json (model schema) plus latents.csv (the
N x M matrix of true coefficient rows, needed to evaluate the true-model
reconstruction error).  All writes go through a temp file and a rename.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .core import (
    FunctionalDataset,
    ModelParams,
    ProblemShape,
    dumps_model,
    params_from_json_dict,
)
from .synth import GroundTruth

__all__ = [
    "DataFormatError",
    "atomic_write_text",
    "write_dataset",
    "read_dataset",
    "write_model",
    "read_model",
    "write_metrics",
]

FLOAT_FMT = "%.17g"


class DataFormatError(ValueError):
    """Malformed on-disk data; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"{message} (line {line})")


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(dirpath, data: FunctionalDataset, truth: GroundTruth | None = None) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    sh = data.shape
    manifest = {
        "P": sh.P,
        "L": list(sh.L),
        "T": sh.T,
        "N": sh.N,
        "grid": [float(f"{v:.17g}") for v in data.grid],
        "has_truth": truth is not None,
    }
    atomic_write_text(d / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1))

    lines = ["sample,node,function,time_index,value"]
    for n in range(sh.N):
        for j in range(sh.P):
            for l in range(sh.L[j]):
                row = data.values[j][n, l]
                for t in range(sh.T):
                    lines.append(f"{n},{j},{l},{t},{FLOAT_FMT % row[t]}")
    atomic_write_text(d / "data.csv", "\n".join(lines) + "\n")

    if truth is not None:
        adj = truth.adjacency_true.astype(int)
        atomic_write_text(
            d / "adjacency.csv", "\n".join(",".join(str(v) for v in r) for r in adj) + "\n"
        )
        atomic_write_text(d / "truth_params.json", dumps_model(truth.params_true))
        lat = "\n".join(",".join(FLOAT_FMT % v for v in row) for row in truth.latents)
        atomic_write_text(d / "latents.csv", lat + "\n")


def read_dataset(dirpath, K) -> tuple[FunctionalDataset, dict]:
    """Load a dataset directory.

    K (one int, or one per node) completes the model shape; it is a modeling
    choice, not a property of the data.  Returns the dataset plus a dict with
    whatever truth artifacts the directory holds (adjacency, params, latents).
    """
    d = Path(dirpath)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise DataFormatError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
        P, L, T, N = manifest["P"], manifest["L"], manifest["T"], manifest["N"]
    except (KeyError, json.JSONDecodeError) as e:
        raise DataFormatError(f"invalid manifest.json: {e}") from e
    K = tuple(K if np.iterable(K) else [int(K)] * P)
    shape = ProblemShape(P=P, L=tuple(L), K=K, T=T, N=N)
    grid = np.asarray(manifest["grid"], dtype=float)

    values = [np.full((N, L[j], T), np.nan) for j in range(P)]
    path = d / "data.csv"
    if not path.exists():
        raise DataFormatError(f"missing data.csv in {d}")
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != "sample,node,function,time_index,value":
            raise DataFormatError("data.csv: unexpected header", line=1)
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise DataFormatError("data.csv: expected 5 fields", line=lineno)
            try:
                n, j, l, t = (int(p) for p in parts[:4])
                v = float(parts[4])
            except ValueError:
                raise DataFormatError("data.csv: unparsable row", line=lineno)
            if not (0 <= n < N and 0 <= j < P and 0 <= l < L[j] and 0 <= t < T):
                raise DataFormatError("data.csv: index out of range", line=lineno)
            values[j][n, l, t] = v
    for j in range(P):
        if np.any(np.isnan(values[j])):
            raise DataFormatError(f"data.csv: missing entries for node {j}")
    data = FunctionalDataset(shape=shape, values=tuple(values), grid=grid)

    truth: dict = {}
    apath = d / "adjacency.csv"
    if apath.exists():
        adj = np.loadtxt(apath, delimiter=",", dtype=int, ndmin=2)
        if adj.shape != (P, P):
            raise DataFormatError("adjacency.csv has wrong shape")
        truth["adjacency"] = adj.astype(bool)
    tpath = d / "truth_params.json"
    if tpath.exists():
        truth["params"] = params_from_json_dict(json.loads(tpath.read_text()))
    lpath = d / "latents.csv"
    if lpath.exists():
        truth["latents"] = np.loadtxt(lpath, delimiter=",", ndmin=2)
    return data, truth


def write_model(path, params: ModelParams, report: dict | None = None) -> None:
    atomic_write_text(Path(path), dumps_model(params, extra={"report": report} if report else None))


def read_model(path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    params = params_from_json_dict(doc)
    return params, doc.get("report", {})


def write_metrics(path, metrics: dict) -> None:
    atomic_write_text(Path(path), json.dumps(metrics, sort_keys=True, indent=1))

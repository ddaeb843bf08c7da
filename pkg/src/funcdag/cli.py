"""Command-line front end: generate / fit / eval / benchmark.

Configuration is one JSON file; the --lambda, --seed, --method, --threads
and --w-threshold flags override the matching top-level keys.  Exit codes:
0 ok, 2 input error, 3 I/O error, 4 non-convergence or runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, em, io, metrics
from .core import ProblemShape, compute_W, default_mask, params_from_json_dict
from .mstep import SolverConfig
from .synth import SynthConfig, generate_dataset

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_IO = 3
EXIT_NOCONV = 4

_METHODS = ("multifun", "mfgm", "notears")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        self.message = message
        super().__init__(message)


def _load_config(path: str | None, overrides: dict) -> dict:
    cfg: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(EXIT_INPUT, f"config file not found: {p}")
        try:
            cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise CliError(EXIT_INPUT, f"config is not valid JSON: {e}")
        if not isinstance(cfg, dict):
            raise CliError(EXIT_INPUT, "config must be a JSON object")
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = v
    return cfg


def _get(cfg: dict, key: str, typ, default=None, required=False):
    if key not in cfg:
        if required:
            raise CliError(EXIT_INPUT, f"config key missing: '{key}'")
        return default
    try:
        v = cfg[key]
        if typ is int and isinstance(v, float) and v != int(v):
            raise ValueError
        return typ(v)
    except (TypeError, ValueError):
        raise CliError(EXIT_INPUT, f"config key '{key}' has invalid value: {cfg[key]!r}")


def _per_node(cfg: dict, base: str, P: int, required=True) -> tuple[int, ...]:
    """Resolve 'L0' / 'K0' scalars or 'L' / 'K' lists into a per-node tuple."""
    if base in cfg:
        vals = cfg[base]
        if not isinstance(vals, list) or len(vals) != P:
            raise CliError(EXIT_INPUT, f"config key '{base}' must be a list of length P")
        return tuple(int(v) for v in vals)
    key = base + "0"
    if key not in cfg:
        if required:
            raise CliError(EXIT_INPUT, f"config key missing: '{key}' (or '{base}')")
        return None
    return (int(_get(cfg, key, int)),) * P


def _mask_from_config(cfg: dict, P: int) -> np.ndarray | None:
    if "mask" not in cfg:
        return None
    m = np.asarray(cfg["mask"])
    if m.shape != (P, P):
        raise CliError(EXIT_INPUT, f"config key 'mask' must be a {P}x{P} 0/1 matrix")
    return m.astype(bool)


def _solver_config(cfg: dict) -> SolverConfig:
    try:
        return SolverConfig(
            lam=_get(cfg, "lambda", float, 0.05),
            h_tol=_get(cfg, "h_tol", float, 1e-8),
            lr=_get(cfg, "lr", float, 10.0),
            inner_max_iter=_get(cfg, "inner_max_iter", int, 400),
            inner_grad_tol=_get(cfg, "inner_grad_tol", float, 1e-6),
            gamma=_get(cfg, "gamma", float, 1.0),
            w_threshold=_get(cfg, "w_threshold", float, 0.3),
        )
    except ValueError as e:
        raise CliError(EXIT_INPUT, f"invalid solver configuration: {e}")


def _fit_config(cfg: dict) -> em.FitConfig:
    try:
        return em.FitConfig(
            solver=_solver_config(cfg),
            eps0=_get(cfg, "eps0", float, 1e-4),
            max_em_iter=_get(cfg, "max_em_iter", int, 200),
            seed=_get(cfg, "seed", int, 0),
            estep=_get(cfg, "estep", str, "direct"),
        )
    except ValueError as e:
        raise CliError(EXIT_INPUT, f"invalid fit configuration: {e}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_config(args.config, {"seed": args.seed})
    P = _get(cfg, "P", int, required=True)
    T = _get(cfg, "T", int, required=True)
    N = _get(cfg, "N", int, required=True)
    L = _per_node(cfg, "L", P)
    K = _per_node(cfg, "K", P)
    try:
        shape = ProblemShape(P=P, L=L, K=K, T=T, N=N)
        scfg = SynthConfig(
            shape=shape,
            edge_prob=_get(cfg, "edge_prob", float, 0.4),
            coef_low=_get(cfg, "coef_low", float, 0.5),
            coef_high=_get(cfg, "coef_high", float, 2.0),
            omega2_true=_get(cfg, "omega2_true", float, 1.0),
            r2_true=_get(cfg, "r2_true", float, 0.01),
            seed=_get(cfg, "seed", int, 0),
            mask=_mask_from_config(cfg, P),
        )
    except ValueError as e:
        raise CliError(EXIT_INPUT, f"invalid generator configuration: {e}")
    data, truth = generate_dataset(scfg)
    try:
        io.write_dataset(args.out, data, truth)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write dataset to {args.out}: {e}")
    print(f"wrote dataset ({shape.P} nodes, {shape.N} samples) to {args.out}")
    return EXIT_OK


def _run_method(method: str, data, fit_cfg, mask, init_params):
    if method == "multifun":
        return em.fit(data, fit_cfg, mask=mask, init_params=init_params)
    if method == "mfgm":
        return baselines.fit_mfgm(data, fit_cfg, mask=mask)
    if method == "notears":
        return baselines.fit_scalar_notears(data, fit_cfg, mask=mask)
    raise CliError(EXIT_INPUT, f"unknown method '{method}' (choose from {_METHODS})")


def cmd_fit(args) -> int:
    cfg = _load_config(
        args.config,
        {
            "lambda": args.lam,
            "seed": args.seed,
            "method": args.method,
            "w_threshold": args.w_threshold,
        },
    )
    method = _get(cfg, "method", str, "multifun")
    if method not in _METHODS:
        raise CliError(EXIT_INPUT, f"unknown method '{method}' (choose from {_METHODS})")
    mpath = Path(args.data) / "manifest.json"
    if not mpath.exists():
        raise CliError(EXIT_INPUT, f"missing manifest: {mpath}")
    P = _get(json.loads(mpath.read_text()), "P", int, required=True)
    K = _per_node(cfg, "K", P)
    try:
        data, _ = io.read_dataset(args.data, K)
    except io.DataFormatError as e:
        raise CliError(EXIT_INPUT, str(e))
    fit_cfg = _fit_config(cfg)
    mask = _mask_from_config(cfg, P)
    init_params = None
    if cfg.get("init_model"):
        try:
            init_params, _ = io.read_model(cfg["init_model"])
        except (OSError, ValueError, KeyError) as e:
            raise CliError(EXIT_INPUT, f"cannot load init_model: {e}")
    try:
        report = _run_method(method, data, fit_cfg, mask, init_params)
    except RuntimeError as e:
        raise CliError(EXIT_NOCONV, f"fit failed: {e}")
    extras = {
        "method": method,
        "iterations": report.iterations,
        "converged": bool(report.converged),
        "h_final": report.h_final,
        "d_history": report.d_history,
        "q_history": report.q_history,
        "W": report.W.W.tolist(),
        "w_threshold": fit_cfg.solver.w_threshold,
        "warnings": report.warnings,
    }
    try:
        io.write_model(args.out, report.params, report=extras)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write model to {args.out}: {e}")
    print(
        f"{method}: {report.iterations} iteration(s), converged={report.converged}, "
        f"h={report.h_final:.2e} -> {args.out}"
    )
    return EXIT_OK if report.converged else EXIT_NOCONV


def cmd_eval(args) -> int:
    try:
        params, report = io.read_model(args.model)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise CliError(EXIT_INPUT, f"cannot load model: {e}")
    tdir = Path(args.data)
    tparams_path = tdir / "truth_params.json"
    if not tparams_path.exists():
        raise CliError(EXIT_INPUT, f"missing ground truth: {tparams_path}")
    truth_params = params_from_json_dict(json.loads(tparams_path.read_text()))
    try:
        data, truth = io.read_dataset(args.data, truth_params.shape.K)
    except io.DataFormatError as e:
        raise CliError(EXIT_INPUT, str(e))
    if "adjacency" not in truth:
        raise CliError(EXIT_INPUT, "dataset has no adjacency.csv to evaluate against")
    adj_true = truth["adjacency"]

    W = np.asarray(report["W"], dtype=float) if "W" in report else compute_W(params).W
    if W.shape != adj_true.shape:
        raise CliError(EXIT_INPUT, f"model W is {W.shape}, truth is {adj_true.shape}")
    w_threshold = args.w_threshold if args.w_threshold is not None else float(
        report.get("w_threshold", 0.3)
    )
    out = metrics.edge_metrics(metrics.threshold_edges(W, w_threshold), adj_true)
    out["w_threshold"] = w_threshold

    shapes_match = (
        params.shape.P == truth_params.shape.P
        and params.shape.L == truth_params.shape.L
        and params.shape.K == truth_params.shape.K
        and params.shape.T == truth_params.shape.T
    )
    if shapes_match:
        out["c_error"] = metrics.aligned_c_error(params, truth_params)
        from .synth import GroundTruth  # lazy: only for the container

        gt = GroundTruth(
            params_true=truth_params,
            params_true_normalized=truth_params,
            adjacency_true=adj_true,
            order=tuple(range(params.shape.P)),
            latents=truth.get("latents"),
        )
        mse = metrics.mse_diagnostics(data, params, gt if "latents" in truth else None)
        out.update(mse)
    else:
        out.update({"c_error": None, "mse_est": None, "mse_true": None, "delta": None})
    try:
        io.write_metrics(args.out, out)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write metrics to {args.out}: {e}")
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

_BENCH_COLUMNS = [
    "P", "L0", "K0", "T", "N", "edge_prob", "lambda", "method", "seed",
    "status", "f1", "precision", "recall", "shd", "c_error",
    "mse_est", "mse_true", "delta", "iterations", "converged", "h_final",
    "runtime_s",
]


def run_benchmark_cell(spec: dict) -> dict:
    """One (cell, seed, method) benchmark run; returns a CSV row dict."""
    row = {k: spec.get(k, "") for k in ("P", "L0", "K0", "T", "N", "edge_prob", "lambda", "method", "seed")}
    t0 = time.perf_counter()
    try:
        shape = ProblemShape(
            P=spec["P"], L=(spec["L0"],) * spec["P"], K=(spec["K0"],) * spec["P"],
            T=spec["T"], N=spec["N"],
        )
        scfg = SynthConfig(
            shape=shape, edge_prob=spec["edge_prob"],
            coef_low=spec.get("coef_low", 0.5), coef_high=spec.get("coef_high", 2.0),
            omega2_true=spec.get("omega2_true", 1.0), r2_true=spec.get("r2_true", 0.01),
            seed=spec["seed"],
        )
        data, truth = generate_dataset(scfg)
        fit_cfg = em.FitConfig(
            solver=SolverConfig(
                lam=spec["lambda"],
                w_threshold=spec.get("w_threshold", 0.3),
                inner_max_iter=spec.get("inner_max_iter", 400),
            ),
            eps0=spec.get("eps0", 1e-4),
            max_em_iter=spec.get("max_em_iter", 200),
            seed=spec["seed"],
        )
        report = _run_method(spec["method"], data, fit_cfg, None, None)
        edges = metrics.threshold_edges(report.W.W, fit_cfg.solver.w_threshold)
        em_out = metrics.edge_metrics(edges, truth.adjacency_true)
        row.update({k: em_out[k] for k in ("f1", "precision", "recall", "shd")})
        if spec["method"] in ("multifun", "mfgm"):
            row["c_error"] = metrics.aligned_c_error(report.params, truth.params_true)
            mse = metrics.mse_diagnostics(data, report.params, truth)
            row.update(mse)
        row.update(
            {
                "iterations": report.iterations,
                "converged": report.converged,
                "h_final": report.h_final,
                "status": "ok",
            }
        )
    except Exception as e:  # noqa: BLE001 - cell failures become rows
        row["status"] = f"error:{type(e).__name__}:{e}"
    row["runtime_s"] = round(time.perf_counter() - t0, 3)
    return {k: row.get(k, "") for k in _BENCH_COLUMNS}


def _bench_key(row: dict) -> tuple:
    return tuple(str(row[k]) for k in ("P", "L0", "K0", "T", "N", "lambda", "method", "seed"))


def cmd_benchmark(args) -> int:
    cfg = _load_config(args.config, {"threads": args.threads})
    grid = cfg.get("grid", {})
    if not isinstance(grid, dict):
        raise CliError(EXIT_INPUT, "config key 'grid' must be an object of lists")

    def axis(name, default):
        vals = grid.get(name, [cfg.get(name, default)])
        if not isinstance(vals, list):
            vals = [vals]
        return vals

    cells = list(
        itertools.product(
            axis("N", 100), axis("P", 5), axis("L0", 2), axis("K0", 3),
            axis("lambda", 0.05), axis("method", "multifun"),
            grid.get("seeds", [cfg.get("seed", 0)]),
        )
    )
    fixed = {
        "T": _get(cfg, "T", int, 50),
        "edge_prob": _get(cfg, "edge_prob", float, 0.4),
        "eps0": _get(cfg, "eps0", float, 1e-4),
        "max_em_iter": _get(cfg, "max_em_iter", int, 200),
        "w_threshold": _get(cfg, "w_threshold", float, 0.3),
        "r2_true": _get(cfg, "r2_true", float, 0.01),
        "omega2_true": _get(cfg, "omega2_true", float, 1.0),
    }
    specs = []
    for N, P, L0, K0, lam, method, seed in cells:
        if method not in _METHODS:
            raise CliError(EXIT_INPUT, f"unknown method '{method}' in grid")
        specs.append(
            dict(fixed, N=int(N), P=int(P), L0=int(L0), K0=int(K0),
                 **{"lambda": float(lam)}, method=method, seed=int(seed))
        )

    out = Path(args.out)
    done: dict[tuple, dict] = {}
    if out.exists():
        with open(out) as f:
            for row in csv.DictReader(f):
                done[_bench_key(row)] = row
    todo = [s for s in specs if _bench_key({k: s.get(k, "") for k in _BENCH_COLUMNS}) not in done]
    print(f"benchmark: {len(specs)} runs ({len(done)} already present, {len(todo)} to do)")

    threads = int(cfg.get("threads", 1) or 1)
    new_rows: list[dict] = []
    if todo:
        if threads > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                new_rows = list(pool.map(run_benchmark_cell, todo))
        else:
            for s in todo:
                new_rows.append(run_benchmark_cell(s))

    all_rows = list(done.values()) + new_rows
    try:
        buf = [",".join(_BENCH_COLUMNS)]
        for row in all_rows:
            buf.append(",".join(str(row.get(k, "")) for k in _BENCH_COLUMNS))
        io.atomic_write_text(out, "\n".join(buf) + "\n")
        _write_summary(out, all_rows)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write benchmark output: {e}")
    n_ok = sum(1 for r in all_rows if str(r.get("status", "")) == "ok")
    print(f"benchmark: {n_ok}/{len(all_rows)} rows ok -> {out}")
    return EXIT_OK if n_ok > 0 else EXIT_NOCONV


def _write_summary(out: Path, rows: list[dict]) -> None:
    """Mean and 95% CI per (cell, method) over seeds, ok rows only."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if str(r.get("status", "")) != "ok":
            continue
        key = tuple(str(r[k]) for k in ("P", "L0", "K0", "T", "N", "lambda", "method"))
        groups.setdefault(key, []).append(r)
    header = ["P", "L0", "K0", "T", "N", "lambda", "method", "n_seeds"]
    stats = ["f1", "shd", "c_error", "mse_est"]
    for s in stats:
        header += [f"{s}_mean", f"{s}_ci95"]
    lines = [",".join(header)]
    for key in sorted(groups):
        rs = groups[key]
        line = list(key) + [str(len(rs))]
        for s in stats:
            vals = [float(r[s]) for r in rs if str(r.get(s, "")) not in ("", "None")]
            if vals:
                mean = float(np.mean(vals))
                ci = 1.96 * float(np.std(vals, ddof=1)) / np.sqrt(len(vals)) if len(vals) > 1 else 0.0
                line += [f"{mean:.6g}", f"{ci:.6g}"]
            else:
                line += ["", ""]
        lines.append(",".join(line))
    io.atomic_write_text(out.with_suffix(".summary.csv"), "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="funcdag", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="fit a model to a dataset directory")
    f.add_argument("--data", required=True)
    f.add_argument("--config", default=None)
    f.add_argument("--out", required=True)
    f.add_argument("--method", choices=_METHODS, default=None)
    f.add_argument("--lambda", dest="lam", type=float, default=None)
    f.add_argument("--seed", type=int, default=None)
    f.add_argument("--w-threshold", type=float, default=None)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="score a fitted model against ground truth")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True, help="dataset directory with ground truth")
    e.add_argument("--out", required=True)
    e.add_argument("--w-threshold", type=float, default=None)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("benchmark", help="run a grid of synthetic benchmarks")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--threads", type=int, default=None)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Rate Pipeline - local rate functions, Skorokhod problems and Monte Carlo checks
for Jackson and processor-sharing networks.

Usage:
    python rate_pipeline.py validate --network J2
    python rate_pipeline.py dump-local --network J2 --K 1
    python rate_pipeline.py rate --network J1 --point 0 --beta 0
    python rate_pipeline.py rate --network J2 --K 1,2 --beta 0,0 --oracle
    python rate_pipeline.py path-rate --network J1 --path paths/drain.json
    python rate_pipeline.py sp --network J2 --tilt unit --path paths/lln.json --dt 1e-3
    python rate_pipeline.py sp-check --network P2 --tilt unit
    python rate_pipeline.py simulate --network J1 --K 1 --beta 0 --epsilon 0.3 --n 40 --reps 10000 --tilt optimal
    python rate_pipeline.py occupancy --network J1s --K 1 --n 200 --reps 1000
    python rate_pipeline.py report --scenario scenarios/mm1_verify.json --pdf

Node indices on the command line and in scenario files are 1-based.
"""

import argparse
import itertools
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ratefn import __version__
from ratefn.condition3 import check_condition3_uniqueness
from ratefn.local_model import (
    LocalModel,
    facet_label,
    iter_rate_rows,
    localize,
    unit_tilt,
)
from ratefn.mc_sim import (
    SimConfig,
    SimulationError,
    empirical_occupancy,
    estimate_tube_prob,
    is_estimate,
    run_replications,
)
from ratefn.model import (
    ModelError,
    NetworkSpec,
    SpecFormatError,
    check_communication,
    facet_index,
    format_direction,
    load_network,
    parse_direction,
    parse_state,
    validate,
)
from ratefn.oracle import brute_force_rate
from ratefn.rate_solver import (
    ConvergenceError,
    PiecewisePath,
    local_rate,
    path_rate_segments,
    tau_from_rho,
)
from ratefn.report_io import (
    RunManifest,
    csv_text,
    dumps_json,
    input_digest,
    load_json,
    save_csv,
    save_json,
)
from ratefn.skorokhod import (
    SPVerificationError,
    check_condition4,
    check_drift_direction,
    check_ps_canonical,
    localize_sp,
    regularity_Q,
    solve_sp,
    sp_for_network,
)

logger = logging.getLogger("rate_pipeline")

DEFAULT_SEED = 20240601
COMMUNICATION_BOX = 3
CROSS_CHECK_BAND = (0.7, 1.3)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_IO = 3


@dataclass
class TaskContext:
    seed: int = DEFAULT_SEED
    threads: int = 1


@dataclass
class TaskOutput:
    result: Dict[str, Any]
    table: Optional[Tuple[List[str], List[list]]] = None
    ok: bool = True
    inputs: Dict[str, str] = field(default_factory=dict)


def exit_code_for(exc: BaseException) -> int:
    """Map a failure to the documented exit codes."""
    if isinstance(exc, (ConvergenceError, SPVerificationError, SimulationError)):
        return EXIT_SOLVER
    if isinstance(exc, (OSError, json.JSONDecodeError, KeyError, SpecFormatError)):
        return EXIT_IO
    if isinstance(exc, (ValueError, TypeError)):
        return EXIT_VALIDATION
    raise exc


def status(message: str, ok: bool = True) -> None:
    print(f"{'✓' if ok else '✗'} {message}", file=sys.stderr)


# --- PARAMETER HELPERS ---

def _network(params: dict, check: bool = True) -> Tuple[NetworkSpec, Dict[str, str]]:
    ref = params.get("network")
    if not ref:
        raise ModelError("A network spec file or registry key is required")
    spec = load_network(str(ref))
    if check:
        violations = validate(spec)
        if violations:
            raise ModelError(f"Invalid network {spec.name}: " + "; ".join(violations))
    return spec, {"network": input_digest(str(ref))}


def _indices(values, N: int) -> Tuple[int, ...]:
    """1-based node list to sorted 0-based tuple."""
    if values is None:
        return ()
    if isinstance(values, str):
        values = [tok for tok in values.split(",") if tok.strip()]
    out = []
    for v in values:
        k = int(v)
        if not 1 <= k <= N:
            raise ModelError(f"Node index {k} is outside 1..{N}")
        out.append(k - 1)
    return tuple(sorted(set(out)))


def _vector(values, N: int, name: str, default: float = 0.0) -> np.ndarray:
    if values is None:
        return np.full(N, default)
    if isinstance(values, str):
        values = parse_state(values)
    arr = np.asarray([float(v) for v in values])
    if arr.shape != (N,):
        raise ModelError(f"{name} has {arr.size} entries, network has N={N}")
    return arr


def _facet_set(spec: NetworkSpec, params: dict) -> Tuple[int, ...]:
    """K from an explicit node list or from the facet of a base point."""
    if params.get("point") is not None:
        point = _vector(params["point"], spec.N, "point")
        if np.any(point < 0):
            raise ModelError(f"Point {point.tolist()} is outside the orthant")
        return tuple(sorted(facet_index(point)))
    return _indices(params.get("K"), spec.N)


def _load_path(ref) -> Tuple[PiecewisePath, Dict[str, str]]:
    if isinstance(ref, (list, tuple)):
        return PiecewisePath.from_pairs(ref), {}
    if not ref:
        raise ModelError("A path file is required")
    return PiecewisePath.from_pairs(load_json(str(ref))), {"path": input_digest(str(ref))}


def _resolve_tilt(spec: NetworkSpec, model: LocalModel, tilt, beta: np.ndarray) -> Tuple[Optional[dict], Dict[str, str]]:
    """
    Tilt from a keyword, a {label: value} mapping or a JSON file of one.

    "none" means no change of measure (naive Monte Carlo), "unit" the
    identity tilt and "optimal" (alias "from-solver") the minimizing tilt of
    the local rate at beta.
    """
    if tilt is None or tilt == "none":
        return None, {}
    if tilt == "unit":
        return unit_tilt(model), {}
    if tilt in ("optimal", "from-solver"):
        solution = local_rate(spec, model.K, beta, model)
        if solution.c is None:
            raise ModelError(f"No optimal tilt: the local rate at beta={beta.tolist()} is {solution.status}")
        return dict(solution.c), {}

    inputs = {}
    if isinstance(tilt, str):
        inputs["tilt"] = input_digest(tilt)
        tilt = load_json(tilt)
    if not isinstance(tilt, dict):
        raise ModelError("Tilt must be none, unit, optimal, a mapping or a JSON file of one")
    return {parse_direction(label, spec.N): float(x) for label, x in tilt.items()}, inputs


def _sweep_grid(sweep, N: int) -> List[np.ndarray]:
    """[[lo, hi, count], ...] per coordinate (or "lo:hi:count,...") to the list of grid points."""
    if isinstance(sweep, str):
        sweep = [tok.split(":") for tok in sweep.split(",")]
    if len(sweep) != N:
        raise ModelError(f"Sweep needs one lo:hi:count range per coordinate (N={N})")
    axes = []
    for item in sweep:
        lo, hi, count = float(item[0]), float(item[1]), int(item[2])
        if count < 1:
            raise ModelError("Sweep counts must be positive")
        axes.append(np.linspace(lo, hi, count) if count > 1 else np.array([lo]))
    return [np.array(p) for p in itertools.product(*axes)]


# --- TASKS ---

def task_validate(params: dict, ctx: TaskContext) -> TaskOutput:
    spec, inputs = _network(params, check=False)
    violations = validate(spec)
    result = {"network": spec.name, "type": spec.kind, "N": spec.N,
              "valid": not violations, "violations": violations}
    if not violations:
        box = [COMMUNICATION_BOX] * spec.N
        origin = [0] * spec.N
        checks = []
        for x, y in ((origin, box), (box, origin)):
            comm = check_communication(spec, x, y)
            checks.append({"from": x, "to": y, "reachable": comm.reachable, "length": comm.length,
                           "bound": comm.bound, "message": comm.message})
            if not comm.reachable:
                violations.append(f"communication: {comm.message}")
        result["communication"] = checks
        result["valid"] = not violations
    return TaskOutput(result, ok=not violations, inputs=inputs)


def task_dump_local(params: dict, ctx: TaskContext) -> TaskOutput:
    spec, inputs = _network(params)
    model = localize(spec, _facet_set(spec, params))
    rows = [list(row) for row in iter_rate_rows(model)]
    result = {"network": spec.name, "K": [k + 1 for k in model.K],
              "directions": [format_direction(v) for v in model.directions],
              "rates": [{"mask": m, "facet": f, "direction": d, "rate": r} for m, f, d, r in rows]}
    return TaskOutput(result, (["mask", "facet", "direction", "rate"], rows), inputs=inputs)


def task_rate(params: dict, ctx: TaskContext) -> TaskOutput:
    spec, inputs = _network(params)
    K = _facet_set(spec, params)
    model = localize(spec, K)
    beta = _vector(params.get("beta"), spec.N, "beta")
    solution = local_rate(spec, K, beta, model)
    result = {"network": spec.name, **solution.to_dict()}

    if params.get("oracle"):
        resolution = float(params.get("resolution", 0.01))
        oracle = brute_force_rate(spec, K, beta, resolution)
        result["oracle"] = {"value": oracle, "resolution": resolution,
                            "difference": solution.value - oracle if math.isfinite(oracle) else None}
        status(f"solver L = {solution.value:.10g}, brute force L = {oracle:.10g}")

    if params.get("beta_prime") is not None and solution.c is not None:
        beta_prime = _vector(params["beta_prime"], spec.N, "beta_prime")
        report = check_condition3_uniqueness(model, solution.c, beta, beta_prime)
        result["uniqueness"] = {"deviation": report.deviation, "bound": report.bound,
                                "lipschitz": report.lipschitz, "passed": report.passed}

    header = [f"beta{i + 1}" for i in range(spec.N)] + ["L", "status"]
    if params.get("sweep"):
        rows = []
        for point in _sweep_grid(params["sweep"], spec.N):
            sol = local_rate(spec, K, point, model)
            rows.append([float(b) for b in point] + [sol.value, sol.status])
        result["sweep_points"] = len(rows)
        logger.info("Swept %d velocities on K=%s", len(rows), [k + 1 for k in K])
    else:
        rows = [[float(b) for b in beta] + [solution.value, solution.status]]
    return TaskOutput(result, (header, rows), inputs=inputs)


def task_path_rate(params: dict, ctx: TaskContext) -> TaskOutput:
    spec, inputs = _network(params)
    phi, path_inputs = _load_path(params.get("path"))
    inputs.update(path_inputs)
    segments = path_rate_segments(spec, phi)
    finite = all(math.isfinite(s.value) for s in segments)
    value = math.fsum((s.t1 - s.t0) * s.value for s in segments) if finite else math.inf
    result = {
        "network": spec.name,
        "value": value,
        "segments": [{"t0": s.t0, "t1": s.t1, "K": [k + 1 for k in s.K],
                      "beta": [float(b) for b in s.beta], "value": s.value} for s in segments],
    }
    header = ["t0", "t1", "K"] + [f"beta{i + 1}" for i in range(spec.N)] + ["L"]
    rows = [[s.t0, s.t1, facet_label(s.K)] + [float(b) for b in s.beta] + [s.value] for s in segments]
    return TaskOutput(result, (header, rows), inputs=inputs)


def _tilted_instance(params: dict):
    spec, inputs = _network(params)
    K = _facet_set(spec, params) if params.get("K") is not None or params.get("point") is not None \
        else tuple(range(spec.N))
    model = localize(spec, K)
    beta = _vector(params.get("beta"), spec.N, "beta")
    c, tilt_inputs = _resolve_tilt(spec, model, params.get("tilt", "unit"), beta)
    inputs.update(tilt_inputs)
    if c is None:
        c = unit_tilt(model)
    return spec, model, beta, c, sp_for_network(spec, c), inputs


def task_sp(params: dict, ctx: TaskContext) -> TaskOutput:
    spec, model, beta, c, sp, inputs = _tilted_instance(params)
    psi, path_inputs = _load_path(params.get("path"))
    inputs.update(path_inputs)
    dt = float(params.get("dt", 1e-3))
    solution = solve_sp(sp, psi, dt)
    N = spec.N
    result = {
        "network": spec.name,
        "tilt": {format_direction(v): x for v, x in c.items()},
        "instance": sp.to_dict(),
        "dt": dt,
        "steps": len(solution.times) - 1,
        "verified": True,
        "total_variation": solution.total_variation,
        "max_abs_phi": float(np.abs(solution.phi).max()),
        "phi_end": solution.phi[-1].tolist(),
        "eta_end": solution.eta[-1].tolist(),
    }
    header = ["t"] + [f"phi{i + 1}" for i in range(N)] + [f"eta{i + 1}" for i in range(N)]
    rows = [[float(t)] + phi.tolist() + eta.tolist()
            for t, phi, eta in zip(solution.times, solution.phi, solution.eta)]
    return TaskOutput(result, (header, rows), inputs=inputs)


def task_sp_check(params: dict, ctx: TaskContext) -> TaskOutput:
    spec, model, beta, c, sp, inputs = _tilted_instance(params)
    verdict = regularity_Q(sp)
    cond4 = check_condition4(model, c, sp)

    localized = []
    for mask in range(1, model.n_facets):
        I = model.facet_of_mask(mask)
        point = [0.0 if i in I else 1.0 for i in range(spec.N)]
        sub = regularity_Q(localize_sp(sp, point))
        localized.append({"facet": facet_label(I), "applicable": sub.applicable,
                          "spectral_radius": sub.spectral_radius, "regular": sub.regular})

    result = {
        "network": spec.name,
        "tilt": {format_direction(v): x for v, x in c.items()},
        "instance": sp.to_dict(),
        "applicable": verdict.applicable,
        "q_matrix": verdict.q_matrix.tolist() if verdict.q_matrix is not None else None,
        "spectral_radius": verdict.spectral_radius,
        "regular": verdict.regular,
        "localized": localized,
        "condition4": {"passed": cond4.passed, "failures": cond4.failures,
                       "checked_facets": cond4.checked_facets},
    }
    if spec.kind == "processor_sharing":
        result["canonical_transform"] = check_ps_canonical(sp, spec, c)
    if params.get("beta") is not None:
        result["lln_direction_admissible"] = check_drift_direction(model, c, beta, sp)

    ok = cond4.passed and verdict.regular is not False
    return TaskOutput(result, ok=ok, inputs=inputs)


def _n_values(n) -> List[int]:
    if isinstance(n, str):
        return [int(tok) for tok in n.split(",") if tok.strip()]
    if isinstance(n, (list, tuple)):
        return [int(v) for v in n]
    return [int(n)]


def task_simulate(params: dict, ctx: TaskContext) -> TaskOutput:
    spec, inputs = _network(params)
    K = _facet_set(spec, params)
    model = localize(spec, K)
    beta = _vector(params.get("beta"), spec.N, "beta")
    control, tilt_inputs = _resolve_tilt(spec, model, params.get("tilt", "none"), beta)
    inputs.update(tilt_inputs)
    seed = int(params.get("seed", ctx.seed))
    epsilon = float(params.get("epsilon", 0.3))
    reps = int(params.get("reps", 1000))
    start = params.get("start")
    start = tuple(_vector(start, spec.N, "start")) if start is not None else None

    rate = local_rate(spec, K, beta, model)
    estimates = []
    for n in _n_values(params.get("n", 40)):
        cfg = SimConfig(n=n, reps=reps, seed=seed, epsilon=epsilon, beta=tuple(beta), start=start)
        if control is None:
            est = estimate_tube_prob(model, cfg, threads=ctx.threads)
        else:
            est = is_estimate(model, cfg, control, threads=ctx.threads)
        estimates.append(est)
        status(f"n={n}: p_hat = {est.p_hat:.6g} +- {est.standard_error:.2g}, q_hat = {est.q_hat:.6g}")

    result = {
        "network": spec.name,
        "K": [k + 1 for k in K],
        "beta": beta.tolist(),
        "epsilon": epsilon,
        "seed": seed,
        "tilt": None if control is None else {format_direction(v): x for v, x in control.items()},
        "L": rate.value,
        "estimates": [e.to_dict() for e in estimates],
    }
    header = ["n", "method", "reps", "hits", "p_hat", "standard_error", "q_hat", "L"]
    rows = [[e.n, e.method, e.reps, e.hits, e.p_hat, e.standard_error, e.q_hat, rate.value] for e in estimates]
    return TaskOutput(result, (header, rows), inputs=inputs)


def task_occupancy(params: dict, ctx: TaskContext) -> TaskOutput:
    spec, inputs = _network(params)
    K = _facet_set(spec, params)
    model = localize(spec, K)
    beta = _vector(params.get("beta"), spec.N, "beta")
    control, tilt_inputs = _resolve_tilt(spec, model, params.get("tilt", "none"), beta)
    inputs.update(tilt_inputs)
    n = _n_values(params.get("n", 200))[0]
    cfg = SimConfig(n=n, reps=int(params.get("reps", 1000)), seed=int(params.get("seed", ctx.seed)),
                    epsilon=float(params.get("epsilon", 1.0)), beta=tuple(beta))
    samples = run_replications(model, cfg, control, ctx.threads)
    rho = empirical_occupancy(samples)
    se = np.std([s.occupation for s in samples], axis=0, ddof=1) / math.sqrt(cfg.reps)
    tau = tau_from_rho(rho, model.K, spec.N)

    labels = [facet_label(model.facet_of_mask(m)) for m in range(model.n_facets)]
    result = {
        "network": spec.name,
        "K": [k + 1 for k in K],
        "n": n,
        "reps": cfg.reps,
        "rho_hat": dict(zip(labels, rho.tolist())),
        "rho_se": dict(zip(labels, se.tolist())),
        "tau_hat": tau.tolist(),
    }
    rows = [[m, label, float(r), float(s)] for m, (label, r, s) in enumerate(zip(labels, rho, se))]
    return TaskOutput(result, (["mask", "facet", "rho_hat", "standard_error"], rows), inputs=inputs)


TASKS: Dict[str, Callable[[dict, TaskContext], TaskOutput]] = {
    "validate": task_validate,
    "dump-local": task_dump_local,
    "rate": task_rate,
    "path-rate": task_path_rate,
    "sp": task_sp,
    "sp-check": task_sp_check,
    "simulate": task_simulate,
    "occupancy": task_occupancy,
}


# --- REPORT ---

def cross_checks(tasks: Sequence[dict]) -> List[dict]:
    """Compare each simulation's q_hat with the local rate L it estimates."""
    checks = []
    for k, entry in enumerate(tasks):
        if entry.get("task") != "simulate" or entry.get("status") != "ok":
            continue
        L = entry["result"].get("L")
        for est in entry["result"].get("estimates", []):
            q_hat = est.get("q_hat")
            ratio = None
            if L is not None and math.isfinite(L) and L > 0 and q_hat is not None and math.isfinite(q_hat):
                ratio = q_hat / L
            checks.append({
                "task_index": k + 1,
                "n": est.get("n"),
                "L": L,
                "q_hat": q_hat,
                "ratio": ratio,
                "band": list(CROSS_CHECK_BAND),
                "within_band": ratio is not None and CROSS_CHECK_BAND[0] <= ratio <= CROSS_CHECK_BAND[1],
            })
    return checks


def load_scenario(path: str) -> List[dict]:
    data = load_json(path)
    if isinstance(data, dict):
        data = data.get("tasks", [])
    if not isinstance(data, list):
        raise SpecFormatError("Scenario file must hold a list of {task, args} objects")
    for k, item in enumerate(data):
        if not isinstance(item, dict) or "task" not in item:
            raise SpecFormatError(f"Scenario entry {k + 1} has no 'task' field")
    return data


def _run_scenario_task(k: int, item: dict, default_network: Optional[str], ctx: TaskContext,
                       out_dir: Path, digest: str) -> dict:
    name = item["task"]
    args = dict(item.get("args", {}))
    if default_network and "network" not in args:
        args["network"] = default_network
    entry = {"task": name, "args": args}
    try:
        handler = TASKS.get(name)
        if handler is None:
            raise ModelError(f"Unknown task '{name}' (known: {', '.join(sorted(TASKS))})")
        output = handler(args, ctx)
    except Exception as e:
        code = exit_code_for(e)
        logger.debug("Task %d (%s) failed", k + 1, name, exc_info=True)
        entry.update(status="error", error=f"{type(e).__name__}: {e}", exit_code=code)
        return entry

    entry.update(status="ok" if output.ok else "failed", result=output.result)
    if not output.ok:
        entry["exit_code"] = EXIT_VALIDATION
    entry["outputs"] = write_outputs(f"task_{k + 1:02d}_{name}", output, out_dir, digest)
    return entry


def run_report(scenario: str, default_network: Optional[str], ctx: TaskContext, out_dir: Path,
               digest: str) -> Tuple[dict, int]:
    """
    Run every scenario task, isolate per-task failures and cross-link results.

    Returns:
        (bundle, exit code): the code is the highest code of any failed task, 0 if none failed
    """
    items = load_scenario(scenario)

    parallel = ctx.threads > 1 and len(items) > 1
    task_ctx = TaskContext(seed=ctx.seed, threads=1) if parallel else ctx

    def one(pair):
        k, item = pair
        return _run_scenario_task(k, item, default_network, task_ctx, out_dir, digest)

    if parallel:
        with ThreadPoolExecutor(max_workers=ctx.threads) as pool:
            entries = list(pool.map(one, enumerate(items)))
    else:
        entries = [one(pair) for pair in enumerate(items)]

    for k, entry in enumerate(entries):
        status(f"task {k + 1} {entry['task']}: {entry['status']}", entry["status"] == "ok")

    bundle = {
        "scenario": Path(scenario).stem,
        "manifest": digest,
        "tasks": entries,
        "cross_checks": cross_checks(entries),
    }
    code = max((entry.get("exit_code", EXIT_OK) for entry in entries), default=EXIT_OK)
    return bundle, code


# --- OUTPUT ---

def write_outputs(stem: str, output: TaskOutput, out_dir: Path, digest: str) -> List[str]:
    """Write <stem>.json and, when the task has a table, <stem>.csv; both carry the manifest digest."""
    paths = []
    json_path = out_dir / f"{stem}.json"
    save_json({"manifest": digest, **output.result}, json_path)
    paths.append(str(json_path))
    if output.table is not None:
        header, rows = output.table
        csv_path = out_dir / f"{stem}.csv"
        save_csv(csv_path, header, rows, digest)
        paths.append(str(csv_path))
    return paths


def _task_params(args: argparse.Namespace) -> dict:
    """Command-line flags to the params dict the task functions share with scenario files."""
    keys = ("network", "K", "point", "beta", "beta_prime", "oracle", "resolution", "sweep", "path",
            "tilt", "dt", "epsilon", "n", "reps", "start")
    params = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if params.get("oracle") is False:
        params.pop("oracle")
    return params


def _flags(args: argparse.Namespace) -> dict:
    skip = {"handler", "out_dir", "verbose", "threads", "format", "pdf", "command"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip and v is not None}


def _run_command(args: argparse.Namespace) -> int:
    out_dir = Path(args.out_dir)
    ctx = TaskContext(seed=args.seed, threads=max(1, args.threads))

    if args.command == "report":
        inputs = {"scenario": input_digest(args.scenario)}
        if args.network:
            inputs["network"] = input_digest(args.network)
        manifest = RunManifest(args.command, inputs, __version__, args.seed, _flags(args))
        print(f"Running scenario: {args.scenario}", file=sys.stderr)
        bundle, code = run_report(args.scenario, args.network, ctx, out_dir, manifest.digest)
        bundle_path = out_dir / "bundle.json"
        save_json(bundle, bundle_path)
        manifest.outputs.append(str(bundle_path))
        for entry in bundle["tasks"]:
            manifest.outputs.extend(entry.get("outputs", []))
        if args.pdf:
            from ratefn.report_pdf import generate_report_pdf
            pdf_path = out_dir / "summary.pdf"
            generate_report_pdf(bundle, str(pdf_path), manifest.digest)
            manifest.outputs.append(str(pdf_path))
            status(f"Summary PDF: {pdf_path}")
        for check in bundle["cross_checks"]:
            status(f"q_hat = {check['q_hat']:.6g} vs L = {check['L']:.6g}", check["within_band"])
        _finish(manifest, out_dir)
        sys.stdout.write(dumps_json(bundle))
        return code

    params = _task_params(args)
    print(f"Running {args.command} on {params.get('network')}", file=sys.stderr)
    output = TASKS[args.command](params, ctx)
    manifest = RunManifest(args.command, output.inputs, __version__, args.seed, _flags(args))
    manifest.outputs = write_outputs(args.command, output, out_dir, manifest.digest)
    _finish(manifest, out_dir)

    if args.format == "csv" and output.table is not None:
        header, rows = output.table
        sys.stdout.write(csv_text(header, rows, manifest.digest))
    else:
        sys.stdout.write(dumps_json({"manifest": manifest.digest, **output.result}))
    for path in manifest.outputs:
        status(f"Saved {path}")
    if not output.ok:
        for line in output.result.get("violations", []) or output.result.get("condition4", {}).get("failures", []):
            status(line, ok=False)
        return EXIT_VALIDATION
    return EXIT_OK


def _finish(manifest: RunManifest, out_dir: Path) -> None:
    manifest.finish()
    path = out_dir / "manifest.json"
    manifest.outputs.append(str(path))
    save_json(manifest.to_dict(), path)


# --- ARGUMENTS ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Local rate functions, Skorokhod problems and rare-event simulation for queueing networks"
    )
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"Random seed (default: {DEFAULT_SEED})")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads (default: 1)")
    parser.add_argument("--out-dir", "-o", default="output", help="Output directory (default: output/)")
    parser.add_argument("--format", choices=("json", "csv"), default="json",
                        help="Format written to stdout (default: json)")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def network_arg(p, required=True):
        p.add_argument("--network", required=required,
                       help="Network spec JSON file or registry key (J1, J1s, J2, J2u, J3, P2, P2u)")

    def facet_args(p):
        group = p.add_mutually_exclusive_group()
        group.add_argument("--K", help="Constrained nodes, 1-based, comma separated (e.g. 1,2)")
        group.add_argument("--point", help="Base point x; K is the set of its zero coordinates")

    def tilt_arg(p, default):
        p.add_argument("--tilt", default=default,
                       help="none, unit, optimal (from-solver), or a JSON file {direction: c}")

    p = sub.add_parser("validate", help="Check network invariants and communication")
    network_arg(p)

    p = sub.add_parser("dump-local", help="Print the facet rate table of a local model")
    network_arg(p)
    facet_args(p)

    p = sub.add_parser("rate", help="Local rate L(beta) with optimal tilt and occupancy")
    network_arg(p)
    facet_args(p)
    p.add_argument("--beta", help="Velocity, comma separated (default: 0)")
    p.add_argument("--beta-prime", dest="beta_prime",
                   help="Second velocity for the occupancy uniqueness bound")
    p.add_argument("--oracle", action="store_true", help="Also run the brute-force grid oracle")
    p.add_argument("--resolution", type=float, help="Oracle grid resolution (default: 0.01)")
    p.add_argument("--sweep", help="Grid of velocities, lo:hi:count per coordinate, comma separated")

    p = sub.add_parser("path-rate", help="Rate of a piecewise-linear path")
    network_arg(p)
    p.add_argument("--path", required=True, help="Path file [[t, [x...]], ...]")

    p = sub.add_parser("sp", help="Solve the Skorokhod problem for an input path")
    network_arg(p)
    facet_args(p)
    tilt_arg(p, "unit")
    p.add_argument("--beta", help="Velocity for --tilt optimal")
    p.add_argument("--path", required=True, help="Input path file [[t, [x...]], ...]")
    p.add_argument("--dt", type=float, help="Time step (default: 1e-3)")

    p = sub.add_parser("sp-check", help="Q-matrix regularity and reflection-structure checks")
    network_arg(p)
    facet_args(p)
    tilt_arg(p, "unit")
    p.add_argument("--beta", help="Velocity for --tilt optimal and the LLN direction check")

    p = sub.add_parser("simulate", help="Estimate a tube probability")
    network_arg(p)
    facet_args(p)
    tilt_arg(p, "none")
    p.add_argument("--beta", help="Tube velocity (default: 0)")
    p.add_argument("--epsilon", type=float, help="Tube radius (default: 0.3)")
    p.add_argument("--n", help="Scaling parameter(s), comma separated (default: 40)")
    p.add_argument("--reps", type=int, help="Replications (default: 1000)")
    p.add_argument("--start", help="Scaled start point (default: origin on K)")

    p = sub.add_parser("occupancy", help="Empirical facet occupation fractions")
    network_arg(p)
    facet_args(p)
    tilt_arg(p, "none")
    p.add_argument("--beta", help="Velocity for --tilt optimal")
    p.add_argument("--n", help="Scaling parameter (default: 200)")
    p.add_argument("--reps", type=int, help="Replications (default: 1000)")

    p = sub.add_parser("report", help="Run a scenario file and bundle the results")
    network_arg(p, required=False)
    p.add_argument("--scenario", "-s", required=True, help="Scenario JSON: list of {task, args}")
    p.add_argument("--pdf", action="store_true", help="Also write summary.pdf")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        return _run_command(args)
    except Exception as e:
        code = exit_code_for(e)
        logger.debug("Command failed", exc_info=True)
        status(f"ERROR: {e}", ok=False)
        if isinstance(e, KeyError):
            from ratefn.network_registry import get_all_networks
            print("Available networks in registry:", file=sys.stderr)
            for key, entry in get_all_networks().items():
                print(f"  - {key}: {entry.get('display_name', 'N/A')}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

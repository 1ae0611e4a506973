"""Command-line entry point: configuration, orchestration and report emission.

Exit codes: 0 when every check passes, 1 when any check fails or a report cannot be
written, 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import verify as vf
from .lq import ProblemSpec, open_loop_qp, simulate_feedback, value
from .qsde import CoefficientPath, TimeGrid
from .riccati import InversionPolicy, SingularGainError, hermitian_defect, integrate_riccati, positivity_scan

COMMANDS = ("solve-riccati", "simulate", "verify", "converge")
FORMATS = ("csv", "json")
CSV_COLUMNS = ("check", "N", "m", "seed", "measured", "tolerance", "order", "pass")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class ProblemConfig:
    """Inline generator parameters; ``path`` loads a serialized spec instead."""

    structure: str = "scalar"
    N: int = 4
    m: int = 1
    seed: int = 0
    T: float = 1.0
    params: dict = field(default_factory=dict)
    path: str | None = None


@dataclass
class RunConfig:
    command: str = "verify"
    out: str = "qslq-out"
    format: list = field(default_factory=lambda: ["csv", "json"])
    seed: int = 0
    substeps: int = 4
    policy: str = "strict"
    ridge: float = 0.0
    parallel: int = 1
    N_list: list = field(default_factory=lambda: [4, 6, 8])
    m_list: list = field(default_factory=lambda: [1, 2])
    problems_per_cell: int = 5
    ladder: list = field(default_factory=lambda: [4, 5, 6, 7, 8])
    structures: list = field(default_factory=lambda: ["random", "scalar"])
    flow_structures: list = field(default_factory=lambda: ["scalar"])
    T: float = 1.0
    random_controls: int = 20
    tolerances: dict = field(default_factory=dict)
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    write_paths: bool = True
    plots: bool = True

    def suite(self) -> vf.SuiteConfig:
        return vf.SuiteConfig(
            N_list=tuple(self.N_list), m_list=tuple(self.m_list), problems_per_cell=self.problems_per_cell,
            ladder=tuple(self.ladder), structures=tuple(self.structures),
            flow_structures=tuple(self.flow_structures), tolerances=dict(self.tolerances), seed=self.seed,
            substeps=self.substeps, policy=self.policy, ridge=self.ridge, T=self.T,
            random_controls=self.random_controls, parallel=self.parallel,
        )


# --- parsing ------------------------------------------------------------------------


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"duplicate key {k!r}")
        out[k] = v
    return out


def _typed(name, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"field {name!r}: expected true/false")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field {name!r}: expected an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"field {name!r}: expected a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"field {name!r}: expected a string")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"field {name!r}: expected a list")
        return value
    if kind is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"field {name!r}: expected an object")
        return value
    return value


_RUN_TYPES = {
    "command": str, "out": str, "format": list, "seed": int, "substeps": int, "policy": str,
    "ridge": float, "parallel": int, "N_list": list, "m_list": list, "problems_per_cell": int,
    "ladder": list, "structures": list, "flow_structures": list, "T": float, "random_controls": int,
    "tolerances": dict, "problem": dict, "write_paths": bool, "plots": bool,
}
_PROBLEM_TYPES = {"structure": str, "N": int, "m": int, "seed": int, "T": float, "params": dict, "path": str}


def _apply(cfg: RunConfig, doc: dict) -> None:
    for key, val in doc.items():
        if key not in _RUN_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        val = _typed(key, val, _RUN_TYPES[key])
        if key == "problem":
            prob = cfg.problem
            for pk, pv in val.items():
                if pk not in _PROBLEM_TYPES:
                    raise ConfigError(f"unknown key 'problem.{pk}'")
                if pk == "path" and pv is None:
                    prob.path = None
                    continue
                setattr(prob, pk, _typed(f"problem.{pk}", pv, _PROBLEM_TYPES[pk]))
        elif key == "tolerances":
            cfg.tolerances.update({k: _typed(f"tolerances.{k}", v, float) for k, v in val.items()})
        else:
            setattr(cfg, key, val)


def _validate(cfg: RunConfig) -> None:
    if cfg.command not in COMMANDS:
        raise ConfigError(f"field 'command': expected one of {', '.join(COMMANDS)}")
    if not cfg.format or any(f not in FORMATS for f in cfg.format):
        raise ConfigError("field 'format': expected a nonempty subset of csv, json")
    for name in ("N_list", "m_list", "ladder"):
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in getattr(cfg, name)):
            raise ConfigError(f"field {name!r}: expected a list of integers")
    if cfg.policy not in ("strict", "pinv"):
        raise ConfigError("field 'policy': expected strict or pinv")
    if cfg.T <= 0:
        raise ConfigError("field 'T': must be positive")
    for name in ("substeps", "parallel", "problems_per_cell", "random_controls"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"field {name!r}: must be >= 1")
    if cfg.ridge < 0:
        raise ConfigError("field 'ridge': must be >= 0")
    p = cfg.problem
    if p.structure not in vf.STRUCTURES:
        raise ConfigError(f"field 'problem.structure': expected one of {', '.join(vf.STRUCTURES)}")
    if not 2 <= p.N <= vf.DENSE_MODE_BUDGET or p.m < 1:
        raise ConfigError(f"field 'problem.N'/'problem.m': need 2 <= N <= {vf.DENSE_MODE_BUDGET}, m >= 1")
    unknown = set(p.params) - {f.name for f in fields(vf.ScalarParams)}
    if unknown:
        raise ConfigError(f"unknown key 'problem.params.{sorted(unknown)[0]}'")
    try:
        cfg.suite()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qslq", description=__doc__.splitlines()[0],
                                 epilog="Tolerances: --tol-KEY VALUE, e.g. --tol-value_function 2.0")
    ap.add_argument("--config", type=Path, help="JSON configuration file")
    ap.add_argument("--command", choices=COMMANDS)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--format", choices=FORMATS, action="append", help="repeatable; default csv and json")
    ap.add_argument("--substeps", type=int)
    ap.add_argument("--parallel", type=int)
    ap.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    return ap


def parse_config(argv: list[str] | None = None) -> RunConfig:
    """File values first, then flags.  Raises :class:`ConfigError` or ``SystemExit(2)``."""
    ap = build_parser()
    args, rest = ap.parse_known_args(argv)
    tol_flags = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--tol-"):
            ap.error(f"unrecognized argument {tok}")
        key, eq, val = tok[len("--tol-"):].partition("=")
        if not eq:
            if i + 1 >= len(rest):
                ap.error(f"{tok} needs a value")
            i += 1
            val = rest[i]
        try:
            tol_flags[key] = float(val)
        except ValueError:
            raise ConfigError(f"flag --tol-{key}: expected a number, got {val!r}") from None
        i += 1

    cfg = RunConfig()
    if args.config is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from None
        try:
            doc = json.loads(text, object_pairs_hook=_reject_duplicates)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        _apply(cfg, doc)
    for name in ("command", "seed", "out", "format", "substeps", "parallel"):
        val = getattr(args, name)
        if val is not None:
            setattr(cfg, name, val)
    if args.no_plots:
        cfg.plots = False
    cfg.tolerances.update(tol_flags)
    _validate(cfg)
    return cfg


# --- serialization ------------------------------------------------------------------


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _json_num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "null"
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return fmt_float(x)


def results_to_json(results: list[vf.CheckResult]) -> str:
    rows = []
    for r in results:
        parts = [
            f'"check": {json.dumps(r.check)}', f'"N": {r.N}', f'"m": {r.m}', f'"seed": {r.seed}',
            f'"measured": {_json_num(r.measured)}', f'"tolerance": {_json_num(r.tolerance)}',
            f'"order": {_json_num(r.order)}', f'"pass": {_json_num(r.passed)}',
        ]
        rows.append("  {" + ", ".join(parts) + "}")
    return "[\n" + ",\n".join(rows) + "\n]\n"


def results_from_json(text: str) -> list[vf.CheckResult]:
    out = []
    for d in json.loads(text):
        out.append(vf.CheckResult(
            d["check"], d["N"], d["m"], d["seed"],
            math.nan if d["measured"] is None else float(d["measured"]),
            float(d["tolerance"]), None if d["order"] is None else float(d["order"]), d["pass"],
        ))
    return out


def results_to_csv(results: list[vf.CheckResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        w.writerow([r.check, r.N, r.m, r.seed, fmt_float(r.measured), fmt_float(r.tolerance),
                    "" if r.order is None else fmt_float(r.order), "true" if r.passed else "false"])
    return buf.getvalue()


def emit_report(results: list[vf.CheckResult], formats, out: Path) -> None:
    if not results:
        raise ValueError("refusing to emit an empty report")
    if "csv" in formats:
        (out / "results.csv").write_text(results_to_csv(results), newline="")
    if "json" in formats:
        (out / "results.json").write_text(results_to_json(results))


def _cjson(a: np.ndarray):
    a = np.asarray(a, dtype=complex)
    return {"shape": list(a.shape), "re": a.real.ravel().tolist(), "im": a.imag.ravel().tolist()}


def _from_cjson(d) -> np.ndarray:
    return (np.asarray(d["re"], float) + 1j * np.asarray(d["im"], float)).reshape(d["shape"])


def spec_to_json(spec: ProblemSpec) -> dict:
    co = spec.coeffs
    return {
        "t0": spec.grid.t0, "T": spec.grid.T, "N": spec.N, "structure": spec.structure, "seed": spec.seed,
        "A": _cjson(co.A), "B": _cjson(co.B), "C": _cjson(co.C), "D": _cjson(co.D),
        "M": _cjson(spec.M), "R": _cjson(spec.R), "G": _cjson(spec.G), "eta": _cjson(spec.eta),
        "meta": spec.meta,
    }


def spec_from_json(d: dict) -> ProblemSpec:
    grid = TimeGrid(d["t0"], d["T"], d["N"])
    co = CoefficientPath(*(_from_cjson(d[k]) for k in "ABCD"))
    return ProblemSpec(grid, co, _from_cjson(d["M"]), _from_cjson(d["R"]), _from_cjson(d["G"]),
                       _from_cjson(d["eta"]), seed=d.get("seed"), structure=d.get("structure", "custom"),
                       meta=d.get("meta", {}))


# --- commands -----------------------------------------------------------------------


def _problem(cfg: RunConfig) -> ProblemSpec:
    p = cfg.problem
    if p.path:
        try:
            return spec_from_json(json.loads(Path(p.path).read_text()))
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"field 'problem.path': cannot load spec: {exc}") from None
    if p.structure == "scalar" and (p.params or p.seed == 0):
        return vf.scalar_problem(p.N, vf.ScalarParams(**p.params), p.T, seed=p.seed)
    return vf.random_problem(p.N, p.m, p.seed, p.structure, p.T)


def _check(cfg, name, key, spec, measured, dt=None):
    suite = cfg.suite()
    return vf._result(suite, name, key, spec.N, spec.m, spec.seed or 0, measured, dt)


def cmd_solve_riccati(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    spec = _problem(cfg)
    policy = InversionPolicy(cfg.policy, cfg.ridge)
    path, gains = integrate_riccati(spec.G, spec.coeffs, spec.M, spec.R, spec.grid, cfg.substeps, policy)
    results = [
        _check(cfg, "hermitian_P", "hermitian_P", spec, hermitian_defect(path.P)),
        _check(cfg, "psd_P", "psd_P", spec, max(0.0, -positivity_scan(path.P).min_eig.min())),
        _check(cfg, "min_eig_K", "min_eig_K", spec, max(0.0, -gains.min_eig_K.min())),
    ]
    extra = {"times": path.times, "P_min_eig": positivity_scan(path.P).min_eig,
             "P_max_eig": positivity_scan(path.P).max_eig}
    if spec.structure == "scalar":
        params = vf.ScalarParams(**spec.meta["params"])
        p = vf.scalar_riccati_oracle(params, spec.grid.times, spec.grid.T)
        err = max(np.linalg.norm(path.P[k][: 1 << k, : 1 << k] - p[k] * np.eye(1 << k), 2)
                  for k in range(spec.N + 1))
        results.append(_check(cfg, "scalar_riccati_oracle", "scalar_riccati_oracle", spec, err))
        extra["oracle"] = p
        extra["P_vacuum"] = path.P[:, 0, 0].real
    if cfg.write_paths:
        doc = {"times": path.times.tolist(), "substeps": path.substeps, "P": _cjson(path.P),
               "Theta": _cjson(gains.Theta), "spec": spec_to_json(spec)}
        (out / "riccati_path.json").write_text(json.dumps(doc))
    return results, extra


def cmd_simulate(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    spec = _problem(cfg)
    policy = InversionPolicy(cfg.policy, cfg.ridge)
    path, gains = integrate_riccati(spec.G, spec.coeffs, spec.M, spec.R, spec.grid, cfg.substeps, policy)
    run = simulate_feedback(spec, gains.Theta)
    J = run.cost.total
    V = value(path, spec.eta)
    qp = open_loop_qp(spec)
    dt = spec.grid.dt
    results = [
        _check(cfg, "value_function", "value_function", spec, abs(J - V), dt),
        _check(cfg, "qp_lower", "qp_lower", spec, max(0.0, qp.J - J) / max(1.0, abs(J))),
        _check(cfg, "qp_upper", "qp_upper", spec, max(0.0, J - qp.J), dt),
    ]
    x, u = run.state.x, run.state.u
    if cfg.write_paths:
        doc = {"times": spec.grid.times.tolist(), "x": _cjson(x), "u": _cjson(u),
               "u_open_loop": _cjson(qp.u), "J_closed": J, "J_open_loop": qp.J, "value": V}
        (out / "state_path.json").write_text(json.dumps(doc))
    extra = {"times": spec.grid.times, "x_norm": np.linalg.norm(x, axis=1),
             "u_norm": np.linalg.norm(u, axis=1), "u_qp_norm": np.linalg.norm(qp.u, axis=1),
             "J_closed": J, "J_qp": qp.J, "value": V}
    return results, extra


def cmd_verify(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    return vf.run_suite(cfg.suite()), {}


def cmd_converge(cfg: RunConfig, out: Path) -> tuple[list, dict]:
    suite = cfg.suite()
    params = vf.ScalarParams(**cfg.problem.params)
    study = vf.convergence_study(params, suite.ladder, suite.T, suite.substeps, suite.seed, suite.inversion,
                                 suite.order_floor)
    sub = vf.substep_study(params, vf.SUBSTEP_N, suite.T)
    results = []
    N, dt = study["N"][-1], study["dt"][-1]
    for c, errs in study["errors"].items():
        order = study["orders"][c]
        results.append(vf._result(suite, f"{c}:ladder", c, N, 1 << N, suite.seed, errs[-1], dt, order))
    ok = sub["order"] >= suite.tolerances["ode_order"] and sub["errors"][-1] <= suite.tolerances["scalar_riccati_oracle"]
    results.append(vf.CheckResult("riccati_substeps:ladder", vf.SUBSTEP_N, 1 << vf.SUBSTEP_N, suite.seed,
                                  float(sub["errors"][-1]), suite.tolerances["scalar_riccati_oracle"],
                                  float(sub["order"]), bool(ok)))
    results = [replace_nan_order(r) for r in results]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["check", *[f"err_N{n}" for n in study["N"]], "slope", "threshold", "pass"])
    for c, errs in study["errors"].items():
        o = study["orders"][c]
        ok = math.isnan(o) or o >= suite.tolerances["order"]
        w.writerow([c, *map(fmt_float, errs), "" if math.isnan(o) else fmt_float(o),
                    fmt_float(suite.tolerances["order"]), "true" if ok else "false"])
    (out / "order_table.csv").write_text(buf.getvalue(), newline="")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["check", *[f"err_substeps{s}" for s in sub["substeps"]], "slope", "threshold", "pass"])
    w.writerow(["riccati_substeps", *map(fmt_float, sub["errors"]), fmt_float(sub["order"]),
                fmt_float(suite.tolerances["ode_order"]),
                "true" if sub["order"] >= suite.tolerances["ode_order"] else "false"])
    (out / "substep_table.csv").write_text(buf.getvalue(), newline="")
    return results, {"study": study, "substeps": sub}


def replace_nan_order(r: vf.CheckResult) -> vf.CheckResult:
    if r.order is not None and math.isnan(r.order):
        return vf.CheckResult(r.check, r.N, r.m, r.seed, r.measured, r.tolerance, None, r.passed)
    return r


HANDLERS = {"solve-riccati": cmd_solve_riccati, "simulate": cmd_simulate, "verify": cmd_verify,
            "converge": cmd_converge}


def manifest(cfg: RunConfig) -> dict:
    doc = asdict(cfg)
    doc["tolerances"] = cfg.suite().tolerances
    return {
        "config": doc,
        "rng": {"algorithm": vf.RNG_NAME, "seed": cfg.seed},
        "versions": {"qslq": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
    }


def run_command(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    man = manifest(cfg)
    start = time.perf_counter()
    status, results, extra = "complete", [], {}
    try:
        results, extra = HANDLERS[cfg.command](cfg, out)
        results = [replace_nan_order(r) for r in results]
    except ConfigError:
        raise
    except (SingularGainError, ArithmeticError, ValueError) as exc:
        status = "failed"
        man["error"] = f"{type(exc).__name__}: {exc}"
        results = [vf.CheckResult(f"{cfg.command}:{type(exc).__name__}", cfg.problem.N, cfg.problem.m,
                                  cfg.seed, math.nan, 0.0, None, False)]
    man["status"] = status
    man["failed"] = status != "complete" or not all(r.passed for r in results)
    man["wall_clock_s"] = round(time.perf_counter() - start, 3)
    man["checks"] = {"total": len(results), "passed": sum(r.passed for r in results)}
    try:
        emit_report(results, cfg.format, out)
        if cfg.plots:
            from . import plots

            man["figures"] = plots.render(cfg.command, results, extra, out)
        (out / "manifest.json").write_text(json.dumps(man, indent=2, default=str) + "\n")
    except OSError as exc:
        print(f"error: writing reports failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAIL {r.check} N={r.N} m={r.m} seed={r.seed} measured={r.measured:.3e} tol={r.tolerance:.3e}"
              + ("" if r.order is None else f" order={r.order:.3f}"), file=sys.stderr)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed; reports in {out}")
    return EXIT_FAIL if failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = parse_config(argv)
        return run_command(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())

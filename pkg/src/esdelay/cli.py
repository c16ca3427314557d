"""Command-line front end.

Exit codes: 0 success, 1 infeasible problem (analyze), 2 usage error,
3 verification failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import json
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .analysis import analyze, find_eps_star, ultimate_box
from .core_model import problem_from_dict, problem_to_dict
from .dde_sim import simulate
from .errors import (
    AnalysisError,
    EsDelayError,
    InfeasibleAtZero,
    ProblemError,
    UnknownExample,
    UnknownTable,
)
from .experiments import (
    EXAMPLE_CLAIMS,
    EXAMPLES,
    TABLES,
    reproduce_table,
    run_example,
    set_path,
    sim_config_from,
    verify_trace,
)

EXIT_OK, EXIT_INFEASIBLE, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3

SCHEMA = {
    "map": {"n", "h_bar", "kappa", "q_star_max", "theta_star_box", "q_star", "theta_star",
            "delta_h", "h_m", "h_M"},
    "delays": {"d_out", "d_in", "m", "mu"},
    "tuning": {"k", "a", "sigma0_bar", "sigma_bar", "q", "epsilon"},
    "simulation": {"init_theta_hat", "horizon", "step", "record_stride"},
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Problem documents
# ---------------------------------------------------------------------------

def load_fixture(name: str) -> dict:
    ref = resources.files("esdelay") / "fixtures" / f"{name}.json"
    if not ref.is_file():
        raise UsageError(f"--example: unknown example '{name}' (known: {', '.join(sorted(EXAMPLES))})")
    return json.loads(ref.read_text(encoding="utf-8"))


def load_document(path: Optional[str], example: Optional[str]) -> dict:
    if path and example:
        raise UsageError("--problem and --example are mutually exclusive")
    if example:
        return load_fixture(example)
    if not path:
        raise UsageError("--problem is required")
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"--problem: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"--problem: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError("--problem: top level must be an object")
    extra = set(doc) - set(SCHEMA) - {"variant"}
    if extra:
        raise UsageError(f"--problem: unknown section(s) {sorted(extra)}")
    return doc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, item: str) -> None:
    """Apply ``section.key=value``; scalars broadcast over list-valued fields."""
    if "=" not in item:
        raise UsageError(f"--set {item!r}: expected key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    value = _parse_value(raw.strip())
    if key == "variant":
        doc["variant"] = value
        return
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SCHEMA or parts[1] not in SCHEMA[parts[0]]:
        raise UsageError(f"--set {key}: not a schema key")
    current = doc.get(parts[0], {}).get(parts[1])
    if isinstance(current, list) and not isinstance(value, list) and parts[1] not in ("h_bar", "delta_h"):
        value = [value] * len(current)
    set_path(doc, key, value)


def parse_sweep(spec: str):
    try:
        param, lo, hi, n = spec.rsplit(":", 3)
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise UsageError(f"--sweep {spec!r}: expected param:lo:hi:n") from None
    if n < 1:
        raise UsageError("--sweep: need at least one point")
    parts = param.split(".")
    if len(parts) != 2 or parts[0] not in SCHEMA or parts[1] not in SCHEMA[parts[0]]:
        raise UsageError(f"--sweep {param}: not a schema key")
    return param, np.linspace(lo, hi, n)


def resolve(args) -> dict:
    doc = load_document(getattr(args, "problem", None), getattr(args, "example", None))
    doc = copy.deepcopy(doc)
    if getattr(args, "variant", None):
        doc["variant"] = args.variant
    for item in getattr(args, "set", None) or []:
        apply_override(doc, item)
    return doc


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(f"not serializable: {type(x)}")


def _write_meta(out: Path, argv: List[str]) -> None:
    meta = {"argv": argv, "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()}
    _write(out / "run_meta.json", _dump(meta))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> int:
    doc = resolve(args)
    out = _out_dir(args)
    try:
        problem = problem_from_dict(doc)
    except ProblemError as exc:
        print(f"infeasible problem: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    report = analyze(problem)
    body = report.to_dict()
    body["document"] = {k: doc[k] for k in sorted(doc) if k in SCHEMA or k == "variant"}
    _write(out / "report.json", _dump(body))
    _write(out / "report.csv", report.to_csv())
    eps = "n/a" if report.eps_star is None else f"{report.eps_star:.6g}"
    print(f"variant: {report.variant}")
    print(f"eps*: {eps}")
    print(f"decay rates: {', '.join(f'{d:.4g}' for d in report.delta_rates)}")
    if report.epsilon is not None:
        print(f"epsilon: {report.epsilon:.6g}  feasible: {report.feasible}")
    if report.ultimate:
        print(f"ultimate bound: {', '.join(f'{x:.4g}' for x in report.ultimate)}")
    if report.refined_bound:
        print(f"refined bound: {', '.join(f'{x:.4g}' for x in report.refined_bound)}")
    for msg in report.messages:
        print(f"note: {msg}", file=sys.stderr)
    return EXIT_OK if report.feasible else EXIT_INFEASIBLE


def cmd_simulate(args) -> int:
    doc = resolve(args)
    out = _out_dir(args)
    problem = problem_from_dict(doc)
    cfg = sim_config_from(doc, problem)
    trace = simulate(problem, cfg)
    claim = EXAMPLE_CLAIMS.get(args.example) if args.example else None
    summary = verify_trace(problem, trace, claim)
    summary["problem"] = problem_to_dict(problem)
    summary["simulation"] = {"horizon": cfg.horizon, "step": cfg.h, "record_stride": cfg.record_stride,
                             "init_theta_hat": list(cfg.init_theta_hat)}
    trace.to_csv(out / "trace.csv")
    _write(out / "verification.json", _dump(summary))
    ok = summary["envelope_ok"] and summary["ultimate_ok"] and summary["published_ok"]
    print(f"samples: {trace.times.size}  horizon: {trace.times[-1]:.6g}")
    print(f"envelope: {'ok' if summary['envelope_ok'] else 'VIOLATED'}  "
          f"ultimate bound: {'ok' if summary['ultimate_ok'] else 'VIOLATED'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_reproduce(args) -> int:
    out = _out_dir(args)
    if args.table is None and args.example is None:
        tables, examples = list(TABLES), []
    else:
        tables = [args.table] if args.table is not None else []
        examples = [args.example] if args.example is not None else []
    ok = True
    for tid in tables:
        rep = reproduce_table(tid)
        _write(out / f"{rep.table}.md", rep.to_markdown())
        _write(out / f"{rep.table}.csv", rep.to_csv())
        status = "pass" if rep.passed else f"FAIL ({len(rep.failures())} cell(s))"
        print(f"{rep.table}: {status}")
        ok &= rep.passed
    for eid in examples:
        res = run_example(eid)
        res.trace.to_csv(out / f"{eid}_trace.csv")
        _write(out / f"{eid}.json", _dump({k: v for k, v in res.summary.items() if k != "seconds"}))
        print(f"{eid}: {'pass' if res.passed else 'FAIL'}")
        ok &= res.passed
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_sweep(args) -> int:
    doc = resolve(args)
    param, values = parse_sweep(args.sweep)
    out = _out_dir(args)
    rows = []
    n_ch = None
    for val in values:
        d = copy.deepcopy(doc)
        apply_override(d, f"{param}={json.dumps(float(val))}")
        row = {"param": param, "value": float(val), "eps_star": None, "omega": None, "status": "ok"}
        try:
            problem = problem_from_dict(d)
            es = find_eps_star(problem)
            row["eps_star"] = es.eps_star
            eps = problem.tuning.epsilon or es.eps_star
            try:
                row["omega"] = list(ultimate_box(problem, eps)[0])
            except AnalysisError:
                row["status"] = f"infeasible at eps={eps:g}"
            n_ch = problem.n
        except InfeasibleAtZero:
            row["status"] = "infeasible"
        except ProblemError as exc:
            row["status"] = type(exc).__name__
        rows.append(row)
    n_ch = n_ch or 1
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "value", "eps_star"] + [f"omega_{i + 1}" for i in range(n_ch)] + ["status"])
        for r in rows:
            om = r["omega"] or [None] * n_ch
            w.writerow([r["param"], repr(r["value"]), "" if r["eps_star"] is None else repr(r["eps_star"])]
                       + ["" if x is None else repr(float(x)) for x in om] + [r["status"]])
    print(f"{len(rows)} rows written to {out / 'sweep.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="esdelay", description="Extremum seeking under large input and output delays.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, problem=True):
        if problem:
            sp.add_argument("--problem", help="problem JSON file")
            sp.add_argument("--example", choices=sorted(EXAMPLES), help="bundled example problem")
            sp.add_argument("--variant", choices=["continuous", "sampled", "single_var_continuous",
                                                  "single_var_sampled"])
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a problem field")
        sp.add_argument("--out", help="output directory (default: current directory)")

    common(sub.add_parser("analyze", help="bounds, eps* and refinement for a problem"))
    common(sub.add_parser("simulate", help="simulate the closed loop and verify the bounds"))
    rp = sub.add_parser("reproduce", help="reproduce published tables or example runs")
    rp.add_argument("--table", help="table id (1-6 or table1..table6)")
    rp.add_argument("--example", choices=sorted(EXAMPLES))
    common(rp, problem=False)
    sp = sub.add_parser("sweep", help="eps* and ultimate bound over a parameter range")
    common(sp)
    sp.add_argument("--sweep", required=True, metavar="PARAM:LO:HI:N")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    handler = {"analyze": cmd_analyze, "simulate": cmd_simulate,
               "reproduce": cmd_reproduce, "sweep": cmd_sweep}[args.command]
    try:
        return handler(args)
    except (UsageError, UnknownTable, UnknownExample) as exc:
        print(f"esdelay {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ProblemError as exc:
        print(f"esdelay {args.command}: invalid problem: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except EsDelayError as exc:
        print(f"esdelay {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    finally:
        _write_meta(_out_dir(args), argv)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

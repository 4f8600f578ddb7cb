#!/usr/bin/env python3
import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

if __package__ in (None, ""):
    sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from src.core.bounds import plan
from src.core.contractivity import (canonical_metric, continuous_rate, discrete_rate, eigencurves,
                                    format_scientific, optimal_underdamped, table1)
from src.core.errors import InvalidParameterError, NumericalFailure
from src.core.integrators import (ChainState, SchemeStep, coupled_contraction_trace, ensemble_csv, simulate,
                                  strong_order_test)
from src.core.state_space import check_invariance_relations, load_model, make_model
from src.core.targets import Target, TargetLoader, make_gaussian_target
from src.core.wasserstein import invariant_bias_scan
from src.utils.logging_config import configure_logging
from src.utils.parsing import ForceScale, parse_float_list, parse_number, parse_scale_list
from src.utils.serialization import dumps, write_atomic
from src.utils.settings import DEFAULT_GAMMA, DEFAULT_RBAR, DEFAULT_SPLIT

"""
Approach:
-> One subcommand per analysis, each a thin wrapper over one library call
-> Parameters are validated before anything is computed
-> Results are rendered completely in memory, then
   printed to stdout, or written atomically to --out
-> Exit status:
    0  success
    1  numerical failure (no invariant law, bound unavailable, solver stalled)
    2  usage error or invalid parameters

Example:
    langevin-certify table1 --kappa 1e9 --h 2,1,0.5,0.25 --c "1/L,2/(L+m),3/(L+m)"
    langevin-certify eigencurves --scheme ubu --m 1 --L 10 --c "3/(L+m)" --h 2,1,0.5,0.25
    langevin-certify plan --scheme ubu --eps 0.01 --kappa 100 --d 50 --m 1 --w0 10
"""

logger = logging.getLogger("src.main")

# Configuration
TABLE_STEPS = "2,1,0.5,0.25"
TABLE_SCALES = "1/L,2/(L+m),3/(L+m)"
ORDER_STEPS = "0.4,0.2,0.1,0.05"
BIAS_STEPS = "0.2,0.1,0.05,0.025"
EIGENCURVE_GRID = 200
ORDER_PATHS = 2000
ORDER_HORIZON = 2.0


def _csv(header: Sequence[str], rows) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _cell(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _report_csv(payload: Dict) -> str:
    rows = [(key, json.dumps(value, sort_keys=True) if isinstance(value, (dict, list)) else _cell(value))
            for key, value in sorted(payload.items())]
    return _csv(("key", "value"), rows)


def _single(values: List[float], flag: str) -> float:
    if len(values) != 1:
        raise InvalidParameterError(f"{flag} takes a single value here")
    return values[0]


def _interval(args) -> tuple:
    m = args.m
    if not m > 0:
        raise InvalidParameterError(f"--m must be positive, got {m}")
    if args.L is not None:
        L = args.L
    elif args.kappa is not None:
        L = _single(parse_float_list(args.kappa), "--kappa") * m
    else:
        raise InvalidParameterError("Give --L or --kappa")
    if not L >= m:
        raise InvalidParameterError(f"Need L >= m, got m={m}, L={L}")
    return m, L


def _scale(args, default: str) -> ForceScale:
    return ForceScale.parse(args.c or default)


def _spectrum(m: float, L: float, d: int) -> np.ndarray:
    if d < 1:
        raise InvalidParameterError("--d must be at least 1")
    if d == 1:
        if m != L:
            raise InvalidParameterError("A one-dimensional Gaussian target needs m = L")
        return np.array([m])
    return np.linspace(m, L, d)


def _target(args) -> Target:
    if args.data:
        if args.ridge is None:
            raise InvalidParameterError("--data needs --ridge")
        return TargetLoader.load_logistic_target(args.data, args.ridge)
    m, L = _interval(args)
    return make_gaussian_target(_spectrum(m, L, args.d))


# commands


def run_table1(args) -> str:
    kappas = parse_float_list(args.kappa or "1e9")
    tables = table1(kappas, parse_scale_list(args.c or TABLE_SCALES), parse_float_list(args.h or TABLE_STEPS),
                    schemes=[s.upper() for s in (args.scheme or "EE,UBU").split(",")], gamma=args.gamma,
                    m=args.m)
    if args.format == "json":
        return dumps([t.to_dict() for t in tables])
    header = ["kappa", "h"]
    header += [name for column in tables[0].columns for name in (column, f"{column} sci")]
    rows = []
    for table in tables:
        for h, row, formatted in zip(table.steps, table.cells, table.formatted()):
            cells = []
            for value, text in zip(row, formatted):
                cells += [text, format_scientific(value)]
            rows.append([f"{table.kappa:g}", f"{h:g}"] + cells)
    return _csv(header, rows)


def run_eigencurves(args) -> str:
    m, L = _interval(args)
    c = _scale(args, "3/(L+m)").value(m, L)
    tables = [eigencurves(SchemeStep(args.scheme or "UBU", h=h, c=c, gamma=args.gamma), m, L, grid=args.grid)
              for h in parse_float_list(args.h or TABLE_STEPS)]
    if args.format == "json":
        return dumps([t.to_dict() for t in tables])
    rows = [[_cell(t.h)] + [_cell(v) for v in row] for t in tables for row in t.rows()]
    return _csv(("h", "H", "lambda_plus", "lambda_minus", "tilde_plus", "tilde_minus", "flag"), rows)


def run_plan(args) -> str:
    m, L = _interval(args)
    if args.eps is None or args.w0 is None:
        raise InvalidParameterError("plan needs --eps and --w0")
    result = plan(args.scheme or "UBU", eps=args.eps, kappa=L / m, m=m, d=args.d, W0=args.w0,
                  rbar=args.rbar, h0=args.h0, L1=args.L1, a=args.split, rate_mode=args.rate_mode,
                  gamma=args.gamma)
    return _render(args, result.to_dict(), "json")


def run_check_model(args) -> str:
    if args.model:
        model = load_model(args.model)
    else:
        c = parse_number(args.c) if args.c else 1.0
        model = make_model(args.kind, args.gamma, c)
    report = check_invariance_relations(model)
    args.exit_status = 0 if report.passed else 1
    return _render(args, report.to_dict(), "json")


def run_rate(args) -> str:
    m, L = _interval(args)
    c = _scale(args, "1/L").value(m, L)
    if args.continuous:
        model = make_model(args.kind, args.gamma, c)
        report = continuous_rate(canonical_metric(model.N), model, m, L, grid=args.grid)
    else:
        h = _single(parse_float_list(args.h or "1"), "--h")
        scheme = SchemeStep(args.scheme or "UBU", h=h, c=c, gamma=args.gamma)
        report = discrete_rate(canonical_metric(scheme.N), scheme, m, L, grid=args.grid)
    return _render(args, report.to_dict(), "json")


def run_optimal_p(args) -> str:
    m, L = _interval(args)
    return _render(args, optimal_underdamped(m, L).to_dict(), "json")


def run_order_test(args) -> str:
    target = _target(args)
    c = _scale(args, "1/L").value(target.m, target.L)
    scheme = SchemeStep(args.scheme or "UBU", h=1.0, c=c, gamma=args.gamma)
    report = strong_order_test(scheme, target, parse_float_list(args.h or ORDER_STEPS), n_paths=args.paths,
                               horizon=args.horizon, seed=args.seed)
    return _render(args, report.to_dict(), "json")


def run_bias_scan(args) -> str:
    m, L = _interval(args)
    c = _scale(args, "1/L").value(m, L)
    Q = np.diag(_spectrum(m, L, args.d))
    scan = invariant_bias_scan(args.scheme or "UBU", Q, parse_float_list(args.h or BIAS_STEPS), c=c,
                               gamma=args.gamma)
    if args.format == "json":
        return dumps(scan.to_dict())
    return _csv(("h", "w2_full", "w2_x"),
                [(_cell(h), _cell(f), _cell(x)) for h, f, x in zip(scan.steps, scan.full, scan.x_marginal)])


def run_sample(args) -> str:
    target = _target(args)
    c = _scale(args, "1/L").value(target.m, target.L)
    h = _single(parse_float_list(args.h or "0.5"), "--h")
    scheme = SchemeStep(args.scheme or "UBU", h=h, c=c, gamma=args.gamma)
    d = target.dimension

    def initial(rng: np.random.Generator) -> ChainState:
        x = rng.standard_normal(d) / math.sqrt(target.m)
        return ChainState(x=x, v=math.sqrt(c) * rng.standard_normal(d) if scheme.kinetic else None)

    ensemble = simulate(scheme, target, initial, n_steps=args.steps, n_chains=args.chains, seed=args.seed)
    return ensemble_csv(ensemble.final)


def run_couple(args) -> str:
    m, L = _interval(args)
    c = _scale(args, "1/L").value(m, L)
    h = _single(parse_float_list(args.h or "0.5"), "--h")
    scheme = SchemeStep(args.scheme or "UBU", h=h, c=c, gamma=args.gamma)
    metric = canonical_metric(scheme.N)
    report = discrete_rate(metric, scheme, m, L)
    target = make_gaussian_target(_spectrum(m, L, args.d))
    ratios = coupled_contraction_trace(scheme, target, np.asarray(metric.P), args.steps, args.seed)
    if args.format == "csv":
        return _csv(("step", "ratio"), [(i + 1, _cell(r)) for i, r in enumerate(ratios)])
    factor = math.sqrt(max(report.rate, 0.0))
    return dumps({"scheme": scheme.scheme, "h": h, "c": c, "rho": report.rate, "contraction_factor": factor,
                  "contractive": report.contractive, "steps": args.steps, "max_ratio": float(ratios.max()),
                  "holds": bool(ratios.max() <= factor + 1e-12)})


def _render(args, payload: Dict, default: str) -> str:
    return _report_csv(payload) if (args.format or default) == "csv" else dumps(payload)


COMMANDS: Dict[str, Callable] = {
    "table1": run_table1,
    "eigencurves": run_eigencurves,
    "plan": run_plan,
    "check-model": run_check_model,
    "rate": run_rate,
    "optimal-p": run_optimal_p,
    "order-test": run_order_test,
    "bias-scan": run_bias_scan,
    "sample": run_sample,
    "couple": run_couple,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--m", type=float, default=1.0, help="strong convexity constant")
    size = common.add_mutually_exclusive_group()
    size.add_argument("--L", type=float, help="gradient Lipschitz constant")
    size.add_argument("--kappa", type=str, help="condition number L/m (table1 takes a list)")
    common.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    common.add_argument("--c", type=str, help="force scale: 1/L, k/(L+m) or a number (table1 takes a list)")
    common.add_argument("--h", type=str, help="step size(s), comma separated")
    common.add_argument("--d", type=int, default=2, help="dimension")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--paths", type=int, default=ORDER_PATHS)
    common.add_argument("--out", type=str, help="output file; stdout when omitted")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--scheme", type=str, help="EM, EE, UBU or BUB")
    common.add_argument("--grid", type=int, default=None)
    common.add_argument("--data", type=str, help="CSV of features with a +-1 label column")
    common.add_argument("--ridge", type=float)
    common.add_argument("--log-level", type=str, default=None)

    parser = argparse.ArgumentParser(prog="langevin-certify",
                                     description="Contraction, bias and mixing-time analysis of Langevin samplers")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("table1", parents=[common], help="per-step contraction rate tables")
    commands.add_parser("eigencurves", parents=[common], help="continuous vs discrete eigenvalue curves")

    p = commands.add_parser("plan", parents=[common], help="step size and count for a target accuracy")
    p.add_argument("--eps", type=float)
    p.add_argument("--w0", type=float)
    p.add_argument("--rbar", type=float, default=DEFAULT_RBAR)
    p.add_argument("--L1", type=float)
    p.add_argument("--h0", type=float)
    p.add_argument("--split", type=float, default=DEFAULT_SPLIT)
    p.add_argument("--rate-mode", choices=("prescribed", "computed"), default="prescribed")

    p = commands.add_parser("check-model", parents=[common], help="invariance relations of a model")
    p.add_argument("--model", type=str, help="model JSON file")
    p.add_argument("--kind", choices=("underdamped", "overdamped"), default="underdamped")

    p = commands.add_parser("rate", parents=[common], help="continuous or discrete contraction rate")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--continuous", action="store_true")
    mode.add_argument("--discrete", action="store_true")
    p.add_argument("--kind", choices=("underdamped", "overdamped"), default="underdamped")

    commands.add_parser("optimal-p", parents=[common], help="optimal metric and force scale")

    p = commands.add_parser("order-test", parents=[common], help="strong order on shared Brownian paths")
    p.add_argument("--horizon", type=float, default=ORDER_HORIZON)

    commands.add_parser("bias-scan", parents=[common], help="exact invariant bias on a Gaussian target")

    p = commands.add_parser("sample", parents=[common], help="run an ensemble of chains")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--chains", type=int, default=100)

    p = commands.add_parser("couple", parents=[common], help="per-step ratios of a coupled pair")
    p.add_argument("--steps", type=int, default=10000)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    if args.grid is None:
        args.grid = EIGENCURVE_GRID if args.command == "eigencurves" else 2048
    args.exit_status = 0

    try:
        content = COMMANDS[args.command](args)
        if args.out:
            write_atomic(args.out, content)
        else:
            sys.stdout.write(content)
    except (NumericalFailure, np.linalg.LinAlgError) as e:
        # LinAlgError is a ValueError, so it is caught first
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (InvalidParameterError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    logger.info("command finished", extra={"command": args.command, "status": args.exit_status})
    return args.exit_status


if __name__ == "__main__":
    sys.exit(main())

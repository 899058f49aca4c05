"""Command-line front end.

    eprlab bohm {trajectories|pattern|probability|coincidence} ...
    eprlab dense {bell|roundtrip|rates|tables} ...
    eprlab teleport {run|expand} ...
    eprlab hadamard {gen|check} ...

Exit status is 0 on success, 2 for bad input and 3 when the numerics break
down.  Failures print one JSON object on stderr.  Every output file is
written to a temporary name first and renamed, so a failed run leaves no
partial output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bohmsim as bs
from . import densecode as dc
from . import teleport as tp
from .errors import ConfigError, EprlabError, NumericalError, ParseError, ValidationError
from .numkit import (
    atomic_write_text,
    complex_matrix_csv,
    fmt_float,
    format_hadamard,
    load_hadamard,
    parse_hadamard,
    sylvester_hadamard,
    validate_hadamard,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
MAX_SEED = 2 ** 64 - 1


# ------------------------------------------------------------------- output


def to_json(obj, indent: int = 0) -> str:
    """JSON with floats at 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k), ensure_ascii=False)}: {to_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(to_json(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + to_json(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        return fmt_float(x)
    return json.dumps(str(obj), ensure_ascii=False)


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


def _write_json(path, obj) -> None:
    _write(path, to_json(obj) + "\n")


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


# ------------------------------------------------------------------- inputs


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v <= MAX_SEED:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from None


def _load_config(path) -> bs.ExperimentConfig:
    try:
        return bs.ExperimentConfig.from_dict(_load_json(path))
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _hadamard_arg(path, order: int | None = None):
    if path is None:
        return None
    try:
        h = load_hadamard(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    if order is not None and h.shape[0] != order:
        from .errors import OrderMismatchError

        raise OrderMismatchError(f"{path}: expected order {order}, got {h.shape[0]}")
    return h


def _state_arg(path, dim: int):
    try:
        return tp._as_state(tp.load_state_csv(path), dim)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def _check_n(N: int) -> int:
    if N < 1:
        raise ConfigError("--n must be at least 1")
    return N


# --------------------------------------------------------------------- bohm


def _t_final(args, config) -> float:
    t = config.params.screen_time if args.t_final is None else args.t_final
    if not t > 0:
        raise ConfigError("--t-final must be positive")
    return t


def cmd_bohm_trajectories(args) -> None:
    config = _load_config(args.config)
    t_final = _t_final(args, config)
    trajs = bs.ensemble_trajectories(config, args.count, args.seed, t_final, samples=args.samples, step=args.step)
    _write(args.out, bs.trajectories_csv(config, trajs))
    if any(tr.truncated for tr in trajs) and args.strict:
        raise NumericalError("some trajectories were truncated at nodes")


def cmd_bohm_pattern(args) -> None:
    config = _load_config(args.config)
    t_final = _t_final(args, config)
    spec = bs.DetectionSpec(args.detector_size, args.bins, (args.y_min, args.y_max))
    pat = bs.ensemble_pattern(config, args.count, args.seed, t_final, spec, step=args.step)
    if pat.report["truncated"] == args.count:
        raise NumericalError("every trajectory was truncated at a node", truncated=args.count)
    _write(args.out, pat.to_csv())
    if args.report:
        _write_json(args.report, pat.report)


def cmd_bohm_probability(args) -> None:
    config = _load_config(args.config)
    t = config.params.screen_time if args.t is None else args.t
    spec = bs.DetectionSpec(args.detector_size)
    norm = bs.normalize_config(config, t)
    prob = bs.joint_detection_probability(config, args.ym, args.yn, spec, t, norm)
    _write_json(args.out, {"yM": args.ym, "yN": args.yn, "detector_size": args.detector_size, "t": t,
                           "normalization": norm.constant, "probability": prob})


def cmd_bohm_coincidence(args) -> None:
    if args.points < 2:
        raise ConfigError("--points must be at least 2")
    theta1 = np.linspace(args.theta1_min, args.theta1_max, args.points)
    theta2 = np.full_like(theta1, args.theta2)
    c = bs.coincidence_pattern(theta1, theta2, args.ky, args.k_sigma0, args.theta_a, args.theta_b)
    _write(args.out, _rows_csv(["theta1", "theta2", "intensity"],
                               [(float(a), float(b), float(v)) for a, b, v in zip(theta1, theta2, c)]))


# -------------------------------------------------------------------- dense


def cmd_dense_bell(args) -> None:
    N = _check_n(args.n)
    h = _hadamard_arg(args.hadamard, 2 * N)
    _write(args.out, complex_matrix_csv(dc.bell_basis(N, h)))


def cmd_dense_roundtrip(args) -> None:
    N = _check_n(args.n)
    h = _hadamard_arg(args.hadamard, 2 * N)
    hn = _hadamard_arg(args.hadamard_n, N)
    if args.all:
        messages = list(range(4 * N * N))
        if dc.message_bits(N) is not None:
            messages = [dc.label_to_message(dc.BellLabel.from_flat(m + 1, N), N) for m in messages]
    elif args.message is not None:
        messages = [args.message if set(args.message) <= {"0", "1"} and dc.message_bits(N) else int(args.message)]
    else:
        raise ConfigError("give --message or --all")
    try:
        report = [dc.dense_roundtrip(N, h, m, hn).as_dict() for m in messages]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _write_json(args.out, report)


def cmd_dense_rates(args) -> None:
    N = _check_n(args.n)
    base = dc.GateTimes.equal(N, args.t)
    try:
        times = dc.GateTimes(t_c=args.tc or base.t_c, t_h=args.th or base.t_h,
                             t_p=args.tp or base.t_p, t_u=args.tu or base.t_u)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rates = dc.info_rates(N, times, args.qubits)
    _write_json(args.out, {"N": N, "times": {"t_c": times.t_c, "t_h": times.t_h, "t_p": times.t_p,
                                             "t_u": times.t_u}, "rates": rates})


def tables_text(N: int) -> tuple[str, str]:
    """Preparation and measurement tables for N as CSV text."""
    prep = dc.preparation_table(N)
    meas = dc.measurement_table(N)
    p = _rows_csv(["state", "k", "sign", "j", "word"],
                  [(r["state"], r["k"], r["sign"], r["j"], r["word"]) for r in prep])
    m = _rows_csv(["state", "after_pcs", "after_hadamards", "outcome_alice", "outcome_bob", "renamed"],
                  [(r["state"], r["after_pcs"], r["after_hadamards"], r["outcome_alice"], r["outcome_bob"],
                    r["renamed"]) for r in meas])
    return p, m


def cmd_dense_tables(args) -> None:
    out = Path(args.out_dir)
    if not out.is_dir():
        raise ConfigError(f"output directory {out} does not exist")
    texts = {}
    for N in (1, 2, 4):
        prep, meas = tables_text(N)
        texts[out / f"preparation_n{N}.csv"] = prep
        texts[out / f"measurement_n{N}.csv"] = meas
    for path, text in texts.items():
        atomic_write_text(path, text)


# ----------------------------------------------------------------- teleport


def cmd_teleport_run(args) -> None:
    N = _check_n(args.n)
    h = _hadamard_arg(args.hadamard, 2 * N)
    if args.m is not None:
        M = _check_n(args.m)
        phi = _state_arg(args.state, 4 * N * M)
        report = tp.teleport_3d(phi, N, M, h, None, seed=args.seed)
    else:
        phi = _state_arg(args.state, 2 * N)
        report = tp.simulate_teleport(phi, N, h, seed=args.seed, method=args.method)
    _write_json(args.out, report.as_dict())


def cmd_teleport_expand(args) -> None:
    N = _check_n(args.n)
    h = _hadamard_arg(args.hadamard, 2 * N)
    phi = _state_arg(args.state, 2 * N)
    residuals = tp.bell_expand(phi, N, h)
    probs = tp.outcome_probabilities(phi, N, h)
    entries = []
    for lab, r in residuals.items():
        entries.append({"label": lab.as_dict(), "probability": float(probs[lab.flat(N) - 1]),
                        "residual": [[float(z.real), float(z.imag)] for z in r / (2 * N)]})
    _write_json(args.out, {"n": N, "outcomes": entries})


# ----------------------------------------------------------------- hadamard


def cmd_hadamard_gen(args) -> None:
    _write(args.out, format_hadamard(sylvester_hadamard(args.exponent)))


def cmd_hadamard_check(args) -> None:
    try:
        text = Path(args.path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {args.path}: {exc.strerror}") from None
    report = validate_hadamard(parse_hadamard(text))
    _write_json(args.out, {"order": report.order, "is_hadamard": report.is_hadamard,
                           "is_symmetric": report.is_symmetric, "is_normalized": report.is_normalized,
                           "accepted": report.accepted})
    if not report.accepted:
        raise ValidationError("matrix is not a normalized symmetric Hadamard matrix")


# ------------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eprlab", description="EPR-pair simulations: Bohmian slits, dense coding, teleportation.")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)

    bohm = groups.add_parser("bohm", help="Bohmian two-particle slit experiments").add_subparsers(
        dest="command", required=True, parser_class=_Parser)

    def ensemble_opts(p):
        p.add_argument("--config", required=True, help="ExperimentConfig JSON")
        p.add_argument("--count", type=_positive_int, default=100)
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--t-final", type=float, default=None, help="defaults to the screen time D m/(hbar k_x)")
        p.add_argument("--step", type=float, default=None, help="base RK4 step in units of 2 m sigma0^2/hbar")
        p.add_argument("--out", default="-")

    p = bohm.add_parser("trajectories")
    ensemble_opts(p)
    p.add_argument("--samples", type=_positive_int, default=101, help="stored points per trajectory")
    p.add_argument("--strict", action="store_true", help="exit 3 if any trajectory is truncated")
    p.set_defaults(func=cmd_bohm_trajectories)

    p = bohm.add_parser("pattern")
    ensemble_opts(p)
    p.add_argument("--bins", type=_positive_int, default=40)
    p.add_argument("--y-min", type=float, default=-20.0)
    p.add_argument("--y-max", type=float, default=20.0)
    p.add_argument("--detector-size", type=float, default=1.0)
    p.add_argument("--report", default=None, help="JSON report path")
    p.set_defaults(func=cmd_bohm_pattern)

    p = bohm.add_parser("probability")
    p.add_argument("--config", required=True)
    p.add_argument("--ym", type=float, required=True)
    p.add_argument("--yn", type=float, required=True)
    p.add_argument("--detector-size", type=float, required=True)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bohm_probability)

    p = bohm.add_parser("coincidence")
    p.add_argument("--ky", type=float, required=True, help="k times Y")
    p.add_argument("--k-sigma0", type=float, required=True)
    p.add_argument("--theta-a", type=float, default=0.0)
    p.add_argument("--theta-b", type=float, default=0.0)
    p.add_argument("--theta2", type=float, default=0.0)
    p.add_argument("--theta1-min", type=float, default=-0.2)
    p.add_argument("--theta1-max", type=float, default=0.2)
    p.add_argument("--points", type=int, default=2001)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bohm_coincidence)

    dense = groups.add_parser("dense", help="dense coding over signed channels").add_subparsers(
        dest="command", required=True, parser_class=_Parser)

    p = dense.add_parser("bell")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--hadamard", default=None, help="order-2N Hadamard file")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_dense_bell)

    p = dense.add_parser("roundtrip")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--message", default=None, help="bit string or integer 0..4N^2-1")
    p.add_argument("--all", action="store_true")
    p.add_argument("--hadamard", default=None, help="order-2N Hadamard file")
    p.add_argument("--hadamard-n", default=None, help="order-N Hadamard file for the final unitary")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_dense_roundtrip)

    p = dense.add_parser("rates")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--t", type=float, default=1.0, help="unit gate time for the equal-time defaults")
    p.add_argument("--tc", type=float, default=None)
    p.add_argument("--th", type=float, default=None)
    p.add_argument("--tp", type=float, default=None)
    p.add_argument("--tu", type=float, default=None)
    p.add_argument("--qubits", type=int, default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_dense_rates)

    p = dense.add_parser("tables")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dense_tables)

    tele = groups.add_parser("teleport", help="teleportation through a shared Bell pair").add_subparsers(
        dest="command", required=True, parser_class=_Parser)

    p = tele.add_parser("run")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, default=None, help="momentum channels for the 3D variant")
    p.add_argument("--state", required=True, help="CSV of re,im amplitudes")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--method", choices=("projection", "chain"), default="projection")
    p.add_argument("--hadamard", default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_teleport_run)

    p = tele.add_parser("expand")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--hadamard", default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_teleport_expand)

    had = groups.add_parser("hadamard", help="Hadamard matrix files").add_subparsers(
        dest="command", required=True, parser_class=_Parser)

    p = had.add_parser("gen")
    p.add_argument("--exponent", type=int, required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_hadamard_gen)

    p = had.add_parser("check")
    p.add_argument("path")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_hadamard_check)
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except EprlabError as exc:
        sys.stderr.write(json.dumps(exc.to_dict(), default=str) + "\n")
        return EXIT_NUMERICAL if isinstance(exc, NumericalError) else EXIT_CONFIG
    except (ValueError, TypeError) as exc:
        sys.stderr.write(json.dumps({"error": "config_error", "message": str(exc)}) + "\n")
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())

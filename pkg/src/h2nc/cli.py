"""Batch driver: build an approximation, measure it and write reports.

Subcommands::

    h2nc run   [--config FILE] [overrides]        one run, reports under --out
    h2nc sweep --axis KEY --values V1,V2,...      runs along one parameter
    h2nc build --save FILE.h2nc [overrides]        build and serialize only
    h2nc apply FILE.h2nc [--input x.txt] --out y.txt

Config files hold flat ``key = value`` lines with ``#`` comments; keys are
the :class:`RunConfig` field names. Command-line flags override the file.
Exit status is 0 on success, 1 for configuration errors and 2 for numerical
failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import os
import sys
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .baselines import acageo_build
from .densecore import RankDeficiencyError
from .geometry import build_cluster_tree
from .h2 import H2Matrix, assemble_h2, far_field_error, load_h2, memory_bytes, save_h2
from .kernels import (
    SingularEntryError,
    coulomb_oracle,
    double_layer_oracle,
    load_mesh,
    random_particles,
    separable_oracle,
    sphere_level_for,
    sphere_mesh,
)
from .mcbh import mcbh_build
from .partition import build_partition

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
PROBLEMS = ("nbody", "solvation", "separable")
METHODS = ("mcbh", "acageo")


class ConfigError(ValueError):
    """A configuration value is missing, malformed or out of range."""


class NumericalFailure(RuntimeError):
    """The build or the error estimate broke down."""


@dataclass
class RunConfig:
    problem: str = "nbody"
    n: int = 5000
    mesh: str | None = None
    tau: float = 1e-4
    block_size: int = 50
    eta: float = 0.0
    iterations: int = 1
    method: str = "mcbh"
    acageo_m: int = 3
    seed: int = 0
    epsilon: float = 78.5
    rank: int = 5
    error_power_iters: int = 30
    trace: bool = True
    out: str | None = None

    def validate(self) -> "RunConfig":
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem: expected one of {', '.join(PROBLEMS)}, got {self.problem!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method: expected one of {', '.join(METHODS)}, got {self.method!r}")
        if not 0 < self.tau < 1:
            raise ConfigError(f"tau: must lie in (0, 1), got {self.tau}")
        if self.iterations < 0:
            raise ConfigError(f"iterations: must be nonnegative, got {self.iterations}")
        if self.block_size < 1:
            raise ConfigError(f"block_size: must be at least 1, got {self.block_size}")
        if self.eta < 0:
            raise ConfigError(f"eta: must be nonnegative, got {self.eta}")
        if self.mesh is None and self.n < 1:
            raise ConfigError(f"n: must be at least 1, got {self.n}")
        if self.acageo_m < 1:
            raise ConfigError(f"acageo_m: must be at least 1, got {self.acageo_m}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon: must be positive, got {self.epsilon}")
        if self.rank < 1:
            raise ConfigError(f"rank: must be at least 1, got {self.rank}")
        if self.error_power_iters < 2:
            raise ConfigError(f"error_power_iters: must be at least 2, got {self.error_power_iters}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed: must be an unsigned 64-bit integer, got {self.seed}")
        return self


@dataclass
class IterationRecord:
    iteration: int
    error: float
    time_s: float
    bytes: int


@dataclass
class RunReport:
    config: RunConfig
    n: int = 0
    build_time_s: float = 0.0
    far_memory_bytes: int = 0
    close_memory_bytes: int = 0
    oracle_entries_evaluated: int = 0
    far_field_error: float = 0.0
    mean_rank: float = 0.0
    compress_ratio: float = 0.0
    trace: list[IterationRecord] = field(default_factory=list)
    status: str = "ok"

    def row(self) -> dict:
        out = {k: getattr(self.config, k) for k in _CSV_CONFIG_KEYS}
        out.update(
            n=self.n,
            build_time_s=self.build_time_s,
            far_memory_bytes=self.far_memory_bytes,
            close_memory_bytes=self.close_memory_bytes,
            oracle_entries_evaluated=self.oracle_entries_evaluated,
            far_field_error=self.far_field_error,
            mean_rank=self.mean_rank,
            compress_ratio=self.compress_ratio,
            status=self.status,
        )
        return out


_CSV_CONFIG_KEYS = ("problem", "method", "tau", "block_size", "eta", "iterations", "acageo_m", "seed")
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _coerce(key: str, raw):
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise ConfigError(f"{key}: unknown configuration key")
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if kind == "int":
            value = float(text) if any(c in text for c in ".eE") else int(text)
            if isinstance(value, float):
                if not value.is_integer():
                    raise ValueError
                value = int(value)
            return value
        if kind == "float":
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
            return value
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    if kind == "str | None" and text.lower() in ("", "none"):
        return None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines into a dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            out[key] = _coerce(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return out


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path))


def make_config(values: dict | None = None, **overrides) -> RunConfig:
    merged = dict(values or {})
    merged.update({k: v for k, v in overrides.items() if v is not None})
    typed = {k: _coerce(k, v) for k, v in merged.items()}
    return RunConfig(**typed).validate()


def thread_count() -> int | None:
    """Value of ``H2NC_THREADS``; accepted for compatibility, the runs stay sequential."""
    raw = os.environ.get("H2NC_THREADS")
    if raw is None or raw.strip() == "":
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"H2NC_THREADS: expected a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"H2NC_THREADS: expected a positive integer, got {raw!r}")
    return value


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------


def make_problem(config: RunConfig):
    """Oracle and point cloud for a configuration."""
    if config.problem == "solvation":
        if config.mesh is not None:
            try:
                mesh = load_mesh(config.mesh)
            except OSError as exc:
                raise ConfigError(f"mesh: cannot read {config.mesh}: {exc.strerror}") from None
            except ValueError as exc:
                raise ConfigError(f"mesh: {exc}") from None
        else:
            mesh = sphere_mesh(sphere_level_for(config.n))
        return double_layer_oracle(mesh, config.epsilon), mesh.points
    system = random_particles(config.n, config.seed)
    if config.problem == "nbody":
        return coulomb_oracle(system), system.points
    return separable_oracle(system.points, system.points, config.rank), system.points


def _check_finite(value, what):
    if not math.isfinite(value):
        raise NumericalFailure(f"{what} is not finite")
    return value


def build(config: RunConfig, trace: list | None = None):
    """Build the approximation; ``trace`` collects per-iteration records when given."""
    oracle, points = make_problem(config)
    tree = build_cluster_tree(points, config.block_size)
    partition = build_partition(tree, tree, config.eta)
    try:
        if config.method == "acageo":
            h2 = acageo_build(oracle, tree, tree, partition, config.tau, config.acageo_m)
        else:
            callback = None
            if trace is not None:
                callback = _trace_callback(config, oracle, tree, partition, trace)
            h2 = mcbh_build(oracle, tree, tree, partition, config.tau, config.iterations, callback)
    except (RankDeficiencyError, SingularEntryError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise NumericalFailure(str(exc)) from exc
    return h2, oracle


def _trace_callback(config, oracle, tree, partition, trace):
    # measures intermediate iterations; the final one is filled in from the result
    origin = time.perf_counter()
    spent = 0.0

    def callback(it, bases):
        nonlocal spent
        start = time.perf_counter()
        elapsed = start - origin - spent
        if it < config.iterations:
            h2 = assemble_h2(oracle, tree, tree, partition, bases.row, bases.col)
            err = far_field_error(h2, oracle, config.error_power_iters, config.seed)
            trace.append(IterationRecord(it, err, elapsed, sum(memory_bytes(h2))))
        spent += time.perf_counter() - start

    return callback


def run(config: RunConfig) -> RunReport:
    """One build plus measurement; writes reports when ``config.out`` is set."""
    config.validate()
    thread_count()
    trace: list[IterationRecord] = [] if config.trace else None
    h2, oracle = build(config, trace)
    err = far_field_error(h2, oracle, config.error_power_iters, config.seed)
    _check_finite(err, "far-field error")
    far_b, close_b = memory_bytes(h2)
    n, m = h2.shape
    report = RunReport(
        config=config,
        n=n,
        build_time_s=h2.stats.time_s,
        far_memory_bytes=far_b,
        close_memory_bytes=close_b,
        oracle_entries_evaluated=h2.stats.entries,
        far_field_error=err,
        mean_rank=h2.mean_rank,
        compress_ratio=(far_b + close_b) / (n * m * 8),
    )
    if trace is not None:
        trace.append(IterationRecord(h2.stats.iterations, err, h2.stats.time_s, far_b + close_b))
        report.trace = trace
    if config.out is not None:
        write_report(report, config.out)
    return report


def write_report(report: RunReport, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# configuration"]
    lines += [f"{f.name} = {getattr(report.config, f.name)}" for f in fields(RunConfig)]
    lines += [
        "# results",
        f"n = {report.n}",
        f"build_time_s = {report.build_time_s:.3f}",
        f"far_memory_bytes = {report.far_memory_bytes}",
        f"close_memory_bytes = {report.close_memory_bytes}",
        f"compress_ratio = {report.compress_ratio:.6g}",
        f"oracle_entries_evaluated = {report.oracle_entries_evaluated}",
        f"mean_rank = {report.mean_rank:.3f}",
        f"far_field_error = {report.far_field_error:.6e}",
        f"status = {report.status}",
    ]
    (out / "report.txt").write_text("\n".join(lines) + "\n")
    _write_csv(out / "report.csv", [report.row()])
    _write_csv(out / "iterations.csv", [dataclasses.asdict(r) for r in report.trace],
               header=[f.name for f in fields(IterationRecord)])


def _write_csv(path, rows, header=None):
    header = header or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        writer.writerows(rows)


def sweep(configs, out=None, axis: str = "sweep") -> list[RunReport]:
    """Run configurations one after another; failures are recorded, not raised."""
    reports = []
    for k, config in enumerate(configs):
        if out is not None:
            config = dataclasses.replace(config, out=str(Path(out) / f"run_{k:03d}"))
        try:
            reports.append(run(config))
        except (ConfigError, NumericalFailure, ValueError) as exc:
            reports.append(RunReport(config=config, status=f"error: {exc}"))
    if out is not None and reports:
        Path(out).mkdir(parents=True, exist_ok=True)
        _write_csv(Path(out) / f"sweep_{axis}.csv", [r.row() for r in reports])
    return reports


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_overrides(p):
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--problem", choices=PROBLEMS)
    p.add_argument("--n", type=int)
    p.add_argument("--mesh")
    p.add_argument("--tau", type=float)
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--iters", dest="iterations", type=int)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--acageo-m", dest="acageo_m", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--power-iters", dest="error_power_iters", type=int)
    p.add_argument("--no-trace", dest="trace", action="store_const", const=False)
    p.add_argument("--out")


_OVERRIDE_KEYS = [f.name for f in fields(RunConfig)]


def _config_from_args(args) -> RunConfig:
    base = load_config(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS if hasattr(args, k)}
    if overrides.get("mesh") is not None and overrides.get("problem") is None and "problem" not in base:
        overrides["problem"] = "solvation"
    return make_config(base, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="h2nc", description="H2 nested cross approximation experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _add_overrides(sub.add_parser("run", help="build, measure and report one configuration"))

    p = sub.add_parser("sweep", help="vary one parameter over a list of values")
    _add_overrides(p)
    p.add_argument("--axis", required=True, help="configuration key to vary")
    p.add_argument("--values", required=True, help="comma-separated values")

    p = sub.add_parser("build", help="build and save the compressed matrix")
    _add_overrides(p)
    p.add_argument("--save", required=True, help="output .h2nc file")

    p = sub.add_parser("apply", help="multiply a saved matrix by a vector")
    p.add_argument("matrix", help="saved .h2nc file")
    p.add_argument("--input", help="text file with the input vector (default: seeded random)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="text file for the result")
    return parser


def _cmd_run(args):
    report = run(_config_from_args(args))
    print(f"n={report.n} error={report.far_field_error:.3e} time={report.build_time_s:.2f}s "
          f"entries={report.oracle_entries_evaluated} ratio={report.compress_ratio:.4f}")


def _cmd_sweep(args):
    config = _config_from_args(args)
    if args.axis not in _FIELD_TYPES or args.axis == "out":
        raise ConfigError(f"axis: unknown configuration key {args.axis!r}")
    values = [v for v in args.values.split(",") if v.strip()]
    configs = [make_config(dataclasses.asdict(config), **{args.axis: v}) for v in values]
    reports = sweep(configs, config.out, args.axis)
    for r in reports:
        print(f"{args.axis}={getattr(r.config, args.axis)} error={r.far_field_error:.3e} "
              f"time={r.build_time_s:.2f}s status={r.status}")


def _cmd_build(args):
    config = _config_from_args(args)
    thread_count()
    h2, _ = build(config)
    save_h2(h2, args.save)
    print(f"saved {args.save} ({h2.shape[0]} x {h2.shape[1]}, {h2.stats.entries} entries)")


def _cmd_apply(args):
    try:
        h2: H2Matrix = load_h2(args.matrix)
    except OSError as exc:
        raise ConfigError(f"matrix: cannot read {args.matrix}: {exc.strerror}") from None
    except ValueError as exc:
        raise ConfigError(f"matrix: {exc}") from None
    if args.input:
        try:
            x = np.loadtxt(args.input, ndmin=1)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"input: {exc}") from None
    else:
        x = np.random.default_rng(np.uint64(args.seed)).standard_normal(h2.shape[1])
    if x.shape != (h2.shape[1],):
        raise ConfigError(f"input: expected {h2.shape[1]} values, got {x.size}")
    y = h2.matvec(x)
    if not np.all(np.isfinite(y)):
        raise NumericalFailure("product is not finite")
    np.savetxt(args.out, y)


_COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "build": _cmd_build, "apply": _cmd_apply}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"h2nc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, RankDeficiencyError, SingularEntryError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"h2nc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Weak-scaling harness: repeated solver runs, averaged, written as CSV.

Usage::

    python -m pgasrt.bench --units 16 --grid 64x64x128 --iters 200 \\
        --mode locality_aware,oblivious --reps 5 --csv out.csv

``--units`` and ``--mode`` accept comma lists; every combination is run.
With ``--weak BXxBYxBZ`` the global grid grows with the unit count so each
unit keeps a block of that size.  A config file holds ``key = value``
lines using the same names as the :class:`Experiment` fields; flags given
on the command line override it.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import statistics
import sys
from dataclasses import dataclass

from .errors import ConfigError, PGASError
from .gaspace import RuntimeConfig
from .heat3d import GridSpec, SolverParams, decompose, factor3, run
from .oracle import write_field
from .transport import LatencyModel, RoutingMode

__all__ = [
    "Experiment",
    "ResultRow",
    "CSV_HEADER",
    "run_experiment",
    "summarize",
    "emit_csv",
    "read_csv",
    "parse_config",
    "parse_grid",
    "weak_grid",
    "main",
]

log = logging.getLogger(__name__)

CSV_HEADER = (
    "run", "units", "node_size", "blades_per_chassis", "chassis_per_group", "mode",
    "nx", "ny", "nz", "iters", "compute_s", "exchange_s", "sync_s", "pure_exchange_s",
)


@dataclass(frozen=True)
class Experiment:
    """One benchmark configuration, run ``repetitions`` times.

    Latencies are given in microseconds (``base_us``) and nanoseconds per
    byte (``invbw_ns``), one value per hop class.
    """

    nx: int = 64
    ny: int = 64
    nz: int = 128
    units: int = 16
    node_size: int = 16
    blades_per_chassis: int = 16
    chassis_per_group: int = 6
    mode: str = "locality_aware"
    iters: int = 100
    reps: int = 25
    seed: int | None = None
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0
    dt: float | None = None
    alpha0: float = 1.0
    alpha_slope: float = 0.0
    convergence_eps: float | None = None
    check_every: int = 100
    boundary_temp: float = 0.0
    initial_temp: float = 1.0
    latency_mode: str = "virtual"
    base_us: tuple = (0.5, 2.0, 4.0, 8.0)
    invbw_ns: tuple = (0.1, 0.5, 0.7, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "mode", RoutingMode.parse(self.mode).value)
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if self.iters < 0:
            raise ConfigError(f"iters must be >= 0, got {self.iters}")

    def grid(self):
        return GridSpec(self.nx, self.ny, self.nz, self.dx, self.dy, self.dz,
                        boundary_temp=self.boundary_temp, initial_temp=self.initial_temp,
                        seed=self.seed)

    def params(self):
        return SolverParams(iterations=self.iters, dt=self.dt, alpha0=self.alpha0,
                            alpha_slope=self.alpha_slope,
                            convergence_eps=self.convergence_eps,
                            check_every=self.check_every)

    def runtime_config(self):
        latency = LatencyModel(tuple(v * 1e-6 for v in self.base_us),
                               tuple(v * 1e-9 for v in self.invbw_ns))
        return RuntimeConfig(num_units=self.units, node_size=self.node_size,
                             blades_per_chassis=self.blades_per_chassis,
                             chassis_per_group=self.chassis_per_group,
                             latency=latency, routing_mode=self.mode,
                             latency_mode=self.latency_mode)

    def validate(self):
        """Reject the experiment before any run is started."""
        grid = self.grid()
        self.params().checked_dt(grid)
        self.runtime_config().validate()
        decompose(grid, self.units)


@dataclass
class ResultRow:
    """Timings of one run, or a ``mean`` / ``std`` summary over runs.

    ``envelopes``, ``barriers`` and ``gets`` are run totals over all units
    and are kept out of the CSV.
    """

    run: int | str
    experiment: Experiment
    compute_s: float
    exchange_s: float
    sync_s: float
    pure_exchange_s: float
    envelopes: int = 0
    barriers: int = 0
    gets: int = 0

    def as_record(self):
        e = self.experiment
        return {
            "run": self.run, "units": e.units, "node_size": e.node_size,
            "blades_per_chassis": e.blades_per_chassis,
            "chassis_per_group": e.chassis_per_group, "mode": e.mode,
            "nx": e.nx, "ny": e.ny, "nz": e.nz, "iters": e.iters,
            "compute_s": self.compute_s, "exchange_s": self.exchange_s,
            "sync_s": self.sync_s, "pure_exchange_s": self.pure_exchange_s,
        }


def run_once(e, index=0):
    report = run(e.grid(), e.params(), e.runtime_config())
    return ResultRow(
        run=index,
        experiment=e,
        compute_s=report.compute_seconds,
        exchange_s=report.exchange_seconds,
        sync_s=report.sync_seconds,
        pure_exchange_s=max(report.pure_exchange_seconds, 0.0),
        envelopes=report.messages,
        barriers=sum(u.barriers for u in report.units),
        gets=report.total_gets,
    ), report


def summarize(rows):
    """Mean row, plus a sample standard deviation row for two or more runs.

    Counters are copied from the first run; they do not vary between
    repetitions.
    """
    if not rows:
        return []
    first = rows[0]
    out = []
    cols = ("compute_s", "exchange_s", "sync_s", "pure_exchange_s")
    stats = [("mean", statistics.fmean)]
    if len(rows) > 1:
        stats.append(("std", statistics.stdev))
    for label, fn in stats:
        values = {c: fn([getattr(r, c) for r in rows]) for c in cols}
        out.append(ResultRow(run=label, experiment=first.experiment,
                             envelopes=first.envelopes, barriers=first.barriers,
                             gets=first.gets, **values))
    return out


def run_experiment(e, on_field=None):
    """Run ``e.reps`` repetitions; per-run rows followed by the summary rows.

    ``on_field(field)`` receives the final field of the last repetition.
    """
    e.validate()
    rows = []
    report = None
    for i in range(e.reps):
        row, report = run_once(e, i)
        log.info("units=%d mode=%s run %d/%d: exchange %.4g s, sync %.4g s",
                 e.units, e.mode, i + 1, e.reps, row.exchange_s, row.sync_s)
        rows.append(row)
    if on_field is not None and report is not None:
        on_field(report.field)
    return rows + summarize(rows)


# -- CSV -----------------------------------------------------------------

def emit_csv(rows, path):
    """Write ``rows`` with :data:`CSV_HEADER`; ``path`` may be ``"-"`` for stdout."""
    def write(fh):
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        for row in rows:
            rec = row.as_record() if isinstance(row, ResultRow) else row
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})

    if path == "-":
        write(sys.stdout)
        return
    try:
        with open(path, "w", newline="") as fh:
            write(fh)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc


_INT_COLS = {"units", "node_size", "blades_per_chassis", "chassis_per_group",
             "nx", "ny", "nz", "iters"}
_FLOAT_COLS = {"compute_s", "exchange_s", "sync_s", "pure_exchange_s"}


def read_csv(path):
    """Read a file written by :func:`emit_csv` back into typed dicts."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        out = []
        for rec in reader:
            for k in _INT_COLS:
                rec[k] = int(rec[k])
            for k in _FLOAT_COLS:
                rec[k] = float(rec[k])
            if rec["run"].isdigit():
                rec["run"] = int(rec["run"])
            out.append(rec)
    return out


# -- configuration -------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(Experiment)}
# aliases accepted in config files and on the command line
_ALIASES = {"iterations": "iters", "repetitions": "reps", "num_units": "units",
            "routing_mode": "mode"}


def parse_grid(text):
    """``"64x64x128"`` -> ``(64, 64, 128)``."""
    parts = str(text).lower().replace(" ", "").split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"grid must look like NXxNYxNZ with positive sizes, got {text!r}")
    return dims


def weak_grid(block, units):
    """Global grid giving every one of ``units`` units a ``block`` of cells."""
    px, py, pz = factor3(units)
    return block[0] * px, block[1] * py, block[2] * pz


def _convert(name, raw):
    if name == "grid":
        return parse_grid(raw)
    if name in ("base_us", "invbw_ns"):
        if isinstance(raw, (tuple, list)):
            vals = list(raw)
        else:
            vals = str(raw).replace(",", " ").split()
        try:
            out = tuple(float(v) for v in vals)
        except ValueError:
            out = ()
        if len(out) != 4:
            raise ConfigError(f"{name} needs four numbers, got {raw!r}")
        return out
    default = _FIELDS[name].default
    text = str(raw).strip()
    if text.lower() in ("none", "") and (default is None or name in ("dt", "convergence_eps")):
        return None
    try:
        if name in ("mode", "latency_mode"):
            return text.lower()
        if isinstance(default, int) or name == "seed":
            return int(text)
        return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def _valid_keys():
    return sorted(set(_FIELDS) | set(_ALIASES) | {"grid"})


def _normalise(values):
    out = {}
    for key, raw in values.items():
        name = _ALIASES.get(key, key)
        if name != "grid" and name not in _FIELDS:
            raise ConfigError(
                f"unknown key {key!r}; valid keys: {', '.join(_valid_keys())}"
            )
        value = _convert(name, raw)
        if name == "grid":
            out["nx"], out["ny"], out["nz"] = value
        else:
            out[name] = value
    return out


def read_config(path):
    """``key = value`` lines of ``path`` as a raw dict; ``#`` starts a comment."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        values[key.strip().lower()] = value.strip()
    return values


def parse_config(path=None, overrides=None):
    """Build an :class:`Experiment` from a config file and flag overrides.

    ``overrides`` maps keys to values (strings or already typed); entries
    whose value is ``None`` are ignored.  Overrides win over the file.
    """
    values = _normalise(read_config(path)) if path is not None else {}
    if overrides:
        values.update(_normalise({k: v for k, v in overrides.items() if v is not None}))
    try:
        return Experiment(**values)
    except TypeError as exc:  # pragma: no cover - keys are checked above
        raise ConfigError(str(exc)) from exc


# -- command line --------------------------------------------------------

def _split(text):
    return [p.strip() for p in str(text).split(",") if p.strip()]


def build_parser():
    p = argparse.ArgumentParser(
        prog="pgasrt-bench",
        description="Run the halo-exchange heat benchmark and write a timing CSV.",
    )
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--units", help="unit count, or a comma list for a sweep")
    p.add_argument("--node-size", type=int)
    p.add_argument("--blades-per-chassis", type=int)
    p.add_argument("--chassis-per-group", type=int)
    p.add_argument("--grid", metavar="NXxNYxNZ", help="global grid size")
    p.add_argument("--weak", metavar="BXxBYxBZ",
                   help="per-unit block; the global grid scales with the unit count")
    p.add_argument("--iters", type=int)
    p.add_argument("--mode", help="locality_aware, oblivious, or a comma list of both")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--csv", metavar="PATH", default="-", help="output file (default stdout)")
    p.add_argument("--summary-only", action="store_true",
                   help="write only the mean and std rows of each experiment")
    p.add_argument("--dump-field", metavar="PATH",
                   help="write the final field of the last run (single experiment only)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def experiments_from_args(args):
    """Expand the parsed flags into the list of experiments to run."""
    flags = {
        "node_size": args.node_size,
        "blades_per_chassis": args.blades_per_chassis,
        "chassis_per_group": args.chassis_per_group,
        "grid": args.grid,
        "iters": args.iters,
        "reps": args.reps,
        "seed": args.seed,
    }
    base = parse_config(args.config, flags)
    unit_list = [int(u) for u in _split(args.units)] if args.units else [base.units]
    mode_list = _split(args.mode) if args.mode else [base.mode]
    block = parse_grid(args.weak) if args.weak else None
    out = []
    for units in unit_list:
        for mode in mode_list:
            changes = {"units": units, "mode": mode}
            if block is not None:
                changes["nx"], changes["ny"], changes["nz"] = weak_grid(block, units)
            try:
                out.append(dataclasses.replace(base, **changes))
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
    return out


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        experiments = experiments_from_args(args)
        if args.dump_field and len(experiments) != 1:
            raise ConfigError("--dump-field needs a single units/mode combination")
        for e in experiments:
            e.validate()
        rows = []
        on_field = (lambda f: write_field(f, args.dump_field)) if args.dump_field else None
        for e in experiments:
            result = run_experiment(e, on_field)
            if args.summary_only:
                result = [r for r in result if isinstance(r.run, str)]
            rows.extend(result)
        emit_csv(rows, args.csv)
    except (PGASError, ValueError, OSError) as exc:
        print(f"pgasrt-bench: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: config files, subcommands, exports.

The config is strict JSON: sections ``domain``, ``medium``, ``rom``,
``source``, ``receivers``, ``time``, ``output``, plus a top-level
``workers`` count.  Unknown keys are rejected so a typo cannot
silently fall back to a default mid-experiment.

Exit codes: 0 success, 1 usage or config problem, 2 numerical
failure, 3 missing or unreadable files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from .errors import ConfigError, DataError, NumericalError, SfwaveError
from .grid import Box, DomainSpec, MediumModel
from .io import read_traces
from .sim import (
    ReceiverLine,
    RunConfig,
    SourceSpec,
    compare_traces,
    export_plot_csv,
    run_offline,
    run_online,
    run_reference,
    verify_subdomain,
)

log = logging.getLogger(__name__)

PLOT_WINDOW = (0.73, 8.2)


# ---------------------------------------------------------------------------
# config parsing


def _section(conf: dict, key: str, required: bool = True) -> dict:
    if key not in conf:
        if required:
            raise ConfigError(f"missing required section {key!r}", key)
        return {}
    value = conf[key]
    if not isinstance(value, dict):
        raise ConfigError(f"section {key!r} must be an object", key)
    return value


def _reject_unknown(table: dict, allowed: set[str], path: str) -> None:
    for key in table:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key {where!r}", where)


def _get(table: dict, key: str, path: str):
    if key not in table:
        raise ConfigError(f"missing required field {path}.{key}", f"{path}.{key}")
    return table[key]


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number", path)
    return float(value)


def _integer(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer", path)
    return value


def _string(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path} must be a string", path)
    return value


def _triple(value, path: str, cast=float) -> tuple:
    if not isinstance(value, list) or len(value) != 3:
        raise ConfigError(f"{path} must be an array of three values", path)
    out = []
    for i, v in enumerate(value):
        item = f"{path}[{i}]"
        out.append(cast(v, item) if cast is not float else _number(v, item))
    return tuple(out)


def _int_triple(value, path: str) -> tuple[int, int, int]:
    return _triple(value, path, cast=_integer)


def parse_config(path: str) -> RunConfig:
    """Read and validate a run configuration file."""
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    try:
        conf = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}",
            path,
        ) from exc
    if not isinstance(conf, dict):
        raise ConfigError("config root must be an object", path)
    _reject_unknown(
        conf,
        {"domain", "medium", "rom", "source", "receivers", "time", "output", "workers"},
        "",
    )

    dom = _section(conf, "domain")
    _reject_unknown(dom, {"extents", "subdomains", "nodes", "outer_bc"}, "domain")
    spec = DomainSpec(
        extents=_triple(_get(dom, "extents", "domain"), "domain.extents"),
        subdomain_counts=_int_triple(_get(dom, "subdomains", "domain"), "domain.subdomains"),
        nodes_per_subdomain=_int_triple(_get(dom, "nodes", "domain"), "domain.nodes"),
        outer_bc=_string(dom.get("outer_bc", "reflecting"), "domain.outer_bc"),
    )

    med = _section(conf, "medium")
    _reject_unknown(med, {"background_c", "regions"}, "medium")
    regions = []
    raw_regions = med.get("regions", [])
    if not isinstance(raw_regions, list):
        raise ConfigError("medium.regions must be an array", "medium.regions")
    for i, entry in enumerate(raw_regions):
        where = f"medium.regions[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where} must be an object", where)
        _reject_unknown(entry, {"lo", "hi", "c"}, where)
        regions.append(
            (
                Box(
                    lo=_triple(_get(entry, "lo", where), f"{where}.lo"),
                    hi=_triple(_get(entry, "hi", where), f"{where}.hi"),
                ),
                _number(_get(entry, "c", where), f"{where}.c"),
            )
        )
    medium = MediumModel(
        background_c=_number(_get(med, "background_c", "medium"), "medium.background_c"),
        regions=tuple(regions),
    )

    rom = _section(conf, "rom")
    _reject_unknown(rom, {"m", "n", "shift"}, "rom")
    modes = _integer(_get(rom, "m", "rom"), "rom.m")
    layers = _integer(_get(rom, "n", "rom"), "rom.n")
    shift = _number(rom.get("shift", 4.0), "rom.shift")

    src = _section(conf, "source")
    _reject_unknown(src, {"position", "wavelength_min", "profile", "amplitude"}, "source")
    source = SourceSpec(
        position=_triple(_get(src, "position", "source"), "source.position"),
        wavelength_min=_number(_get(src, "wavelength_min", "source"), "source.wavelength_min"),
        profile=_string(src.get("profile", "ricker"), "source.profile"),
        amplitude=_number(src.get("amplitude", 1.0), "source.amplitude"),
    )

    rec = _section(conf, "receivers")
    _reject_unknown(rec, {"origin", "axis", "count", "spacing"}, "receivers")
    receivers = ReceiverLine(
        origin=_triple(_get(rec, "origin", "receivers"), "receivers.origin"),
        axis=_integer(_get(rec, "axis", "receivers"), "receivers.axis"),
        count=_integer(_get(rec, "count", "receivers"), "receivers.count"),
        spacing=_number(rec.get("spacing", 0.0), "receivers.spacing"),
    )

    tim = _section(conf, "time")
    _reject_unknown(tim, {"t_end", "dt", "sample_every"}, "time")
    dt = tim.get("dt", "auto")
    if isinstance(dt, str):
        pass
    else:
        dt = _number(dt, "time.dt")

    out = _section(conf, "output", required=False)
    _reject_unknown(out, {"dir", "name", "cache_dir"}, "output")
    cache_dir = out.get("cache_dir")
    if cache_dir is not None:
        cache_dir = _string(cache_dir, "output.cache_dir")

    workers = conf.get("workers", 1)

    return RunConfig(
        domain=spec,
        medium=medium,
        modes_per_face=modes,
        layers=layers,
        shift=shift,
        source=source,
        receivers=receivers,
        t_end=_number(_get(tim, "t_end", "time"), "time.t_end"),
        dt=dt,
        sample_every=_integer(tim.get("sample_every", 1), "time.sample_every"),
        out_dir=_string(out.get("dir", "out"), "output.dir"),
        run_name=_string(out.get("name", "run"), "output.name"),
        cache_dir=cache_dir,
        workers=_integer(workers, "workers"),
    )


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    from dataclasses import replace

    if getattr(args, "workers", None) is not None:
        config = replace(config, workers=args.workers)
    if getattr(args, "cache", None) is not None:
        config = replace(config, cache_dir=args.cache)
    return config


# ---------------------------------------------------------------------------
# subcommands


def _cmd_offline(args) -> int:
    config = _apply_overrides(parse_config(args.config), args)
    result = run_offline(config)
    print(
        f"offline: {result.built} model(s) built, {result.reused} reused "
        f"from cache in {result.seconds:.1f}s"
    )
    return 0


def _cmd_online(args) -> int:
    config = _apply_overrides(parse_config(args.config), args)
    result = run_online(config)
    meta = result.meta
    print(f"online: {meta['steps']} steps at dt {meta['dt']:.6g} -> {result.trace_path}")
    print(
        f"stable step ratio vs fine grid: {meta['dt_ratio']:.3f}; "
        f"{meta['messages_per_step']} face messages per step"
    )
    return 0


def _cmd_reference(args) -> int:
    config = _apply_overrides(parse_config(args.config), args)
    result = run_reference(config)
    meta = result.meta
    print(f"reference: {meta['steps']} steps at dt {meta['dt']:.6g} -> {result.trace_path}")
    return 0


def _parse_alpha(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"subdomain must be three comma-separated indices, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"subdomain must be three integers, got {text!r}") from exc


def _cmd_verify(args) -> int:
    config = _apply_overrides(parse_config(args.config), args)
    alpha = _parse_alpha(args.subdomain)
    report = verify_subdomain(config, alpha, n_max=args.n_max)
    out = args.out or os.path.join(
        config.out_dir, f"{config.run_name}.verify.csv"
    )
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["n", "max_relative_error"])
        for n, err in report["rows"]:
            writer.writerow([n, repr(float(err))])
    print(f"verify: subdomain {alpha}, band {report['omegas'][0]:.4g}.."
          f"{report['omegas'][-1]:.4g} rad/time -> {out}")
    for n, err in report["rows"]:
        print(f"  n={n}: {err:.3e}")
    print(f"  representation agreement at n={args.n_max}: {report['agreement']:.3e}")
    if report["truncated"]:
        print("  note: requested depth was truncated by basis deflation")
    return 0


def _cmd_compare(args) -> int:
    a = read_traces(args.trace_a)
    b = read_traces(args.trace_b)
    report = compare_traces(a, b)
    print(f"relative L2 error: {100.0 * report['error']:.3f}%")
    for r, err in enumerate(report["per_receiver"]):
        print(f"  receiver {r}: {100.0 * err:.3f}%")
    print(
        f"window [0, {report['window'][1]:.6g}], {report['samples']} common samples"
    )
    return 0


def _cmd_export_plot(args) -> int:
    record = read_traces(args.trace)
    out = export_plot_csv(
        record,
        args.out,
        window=(args.window[0], args.window[1]),
        normalize=not args.raw,
    )
    print(f"export-plot: {record.samples.shape[1]} receivers -> {out}")
    return 0


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as config errors."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sfwave", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="run configuration file (strict JSON)")
        p.add_argument("--workers", type=int, help="override the worker count")
        p.add_argument("--cache", help="override the model cache directory")
        return p

    with_config(sub.add_parser("offline", help="build and cache subdomain models"))
    with_config(sub.add_parser("online", help="run the coupled reduced simulation"))
    with_config(sub.add_parser("reference", help="run the fine-grid reference"))

    ver = with_config(sub.add_parser("verify", help="check one subdomain's reduction"))
    ver.add_argument("--subdomain", default="0,0,0", help="subdomain index i,j,k")
    ver.add_argument("--n-max", type=int, default=5, dest="n_max")
    ver.add_argument("--out", help="CSV output path")

    cmp_ = sub.add_parser("compare", help="relative L2 error between two trace files")
    cmp_.add_argument("trace_a")
    cmp_.add_argument("trace_b")

    exp = sub.add_parser("export-plot", help="export traces as plot-ready CSV")
    exp.add_argument("trace")
    exp.add_argument("out")
    exp.add_argument(
        "--window", type=float, nargs=2, default=list(PLOT_WINDOW),
        metavar=("LO", "HI"),
    )
    exp.add_argument("--raw", action="store_true", help="skip per-time normalization")
    return parser


_COMMANDS = {
    "offline": _cmd_offline,
    "online": _cmd_online,
    "reference": _cmd_reference,
    "verify": _cmd_verify,
    "compare": _cmd_compare,
    "export-plot": _cmd_export_plot,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SfwaveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

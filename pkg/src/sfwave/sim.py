"""End-to-end drivers: offline model builds, coupled runs, references.

A run is described by a :class:`RunConfig` tree of plain dataclasses so
the command line can build it from a file and tests can build it
directly.  The offline stage reduces every subdomain and stores the
results in a content-addressed cache; congruent subdomains (same
operator, medium samples, and face layout) share a single cache entry.
The online stage loads the models, picks a stable step, and integrates
the coupled system, recording receiver traces.  A fine-grid reference
run and a trace comparison close the loop.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import reference
from .errors import ConfigError, DataError, NumericalError
from .grid import (
    DomainPartition,
    DomainSpec,
    MediumModel,
    assemble_global_operator,
    assemble_subdomain_operator,
    build_partition,
    sample_medium,
)
from .io import TraceRecord, load_model, save_model, write_meta, write_traces
from .ntd import band_error, frequency_band, ntd_chain, ntd_reduced, ntd_tridiag
from .rom import (
    SubdomainModel,
    block_lanczos,
    build_krylov_basis,
    build_subdomain_model,
    project_reduced,
    subdomain_inputs,
)
from .stepper import (
    CoupledStepper,
    SourceTerm,
    cfl_estimate_coupled,
    make_probe,
    project_source,
)

log = logging.getLogger(__name__)

Alpha = tuple[int, int, int]

CACHE_ENV = "SFWAVE_CACHE_DIR"
CACHE_FORMAT = 1

# Safety factor applied to every stability limit before stepping.
DT_SAFETY = reference.CFL_SAFETY

# A pulse band-limited to wavelengths >= lambda_min needs its peak well
# below the Nyquist-like cap c / lambda_min; 2.5 peak widths cover the
# energetic part of both supported profiles.
PULSE_BANDWIDTH = 2.5
PULSE_DELAY_PERIODS = 1.2

# Verification band relative to the pulse peak: the energetic part of
# the spectrum, where the reduction is tuned and converges cleanly.
SOURCE_BAND = (0.4, 1.6)


# ---------------------------------------------------------------------------
# source and receiver description


def _ricker(f_peak: float, delay: float):
    def pulse(t: float) -> float:
        a = (math.pi * f_peak * (t - delay)) ** 2
        return (1.0 - 2.0 * a) * math.exp(-a)

    return pulse


def _gauss_deriv(f_peak: float, delay: float):
    # Scaled so the extrema are +-1.
    def pulse(t: float) -> float:
        x = math.pi * f_peak * (t - delay)
        return -x * math.sqrt(2.0 * math.e) * math.exp(-x * x)

    return pulse


PULSES = {"ricker": _ricker, "gauss_deriv": _gauss_deriv}


@dataclass(frozen=True)
class SourceSpec:
    """Point source: position, pulse shape, and target resolution.

    ``wavelength_min`` is the shortest wavelength the run should
    resolve; the pulse peak frequency is placed so the energetic band
    stays below ``c_min / wavelength_min``.
    """

    position: tuple[float, float, float]
    wavelength_min: float
    profile: str = "ricker"
    amplitude: float = 1.0

    def __post_init__(self):
        if self.profile not in PULSES:
            known = ", ".join(sorted(PULSES))
            raise ConfigError(
                f"unknown pulse profile {self.profile!r} (known: {known})",
                "source.profile",
            )
        if not self.wavelength_min > 0:
            raise ConfigError(
                "target minimal wavelength must be positive", "source.wavelength_min"
            )
        if not math.isfinite(self.amplitude):
            raise ConfigError("source amplitude must be finite", "source.amplitude")


@dataclass(frozen=True)
class ReceiverLine:
    """Equispaced receivers along one axis."""

    origin: tuple[float, float, float]
    axis: int
    count: int
    spacing: float

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ConfigError("receiver axis must be 0, 1, or 2", "receivers.axis")
        if self.count < 1:
            raise ConfigError("need at least one receiver", "receivers.count")
        if self.count > 1 and not self.spacing > 0:
            raise ConfigError("receiver spacing must be positive", "receivers.spacing")

    def positions(self) -> list[tuple[float, float, float]]:
        out = []
        for r in range(self.count):
            p = list(self.origin)
            p[self.axis] += r * self.spacing
            out.append(tuple(p))
        return out


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to run the offline and online stages."""

    domain: DomainSpec
    medium: MediumModel
    modes_per_face: int
    layers: int
    source: SourceSpec
    receivers: ReceiverLine
    t_end: float
    shift: float = 4.0
    dt: float | str = "auto"
    sample_every: int = 1
    out_dir: str = "out"
    run_name: str = "run"
    cache_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.modes_per_face < 1:
            raise ConfigError("need at least one face mode", "rom.modes_per_face")
        if self.layers < 1:
            raise ConfigError("need at least one layer", "rom.layers")
        if not self.t_end > 0:
            raise ConfigError("t_end must be positive", "time.t_end")
        if self.sample_every < 1:
            raise ConfigError("sample_every must be at least 1", "time.sample_every")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1", "workers")
        if isinstance(self.dt, str):
            if self.dt not in ("auto", "fine"):
                raise ConfigError(
                    f"dt must be 'auto', 'fine', or a positive number, got {self.dt!r}",
                    "time.dt",
                )
        elif not self.dt > 0:
            raise ConfigError("dt must be positive", "time.dt")
        self._check_inside(self.source.position, "source.position")
        for r, pos in enumerate(self.receivers.positions()):
            self._check_inside(pos, f"receivers[{r}]")

    def _check_inside(self, pos, label: str):
        for x, e in zip(pos, self.domain.extents):
            if not (0.0 <= x <= e):
                raise ConfigError(
                    f"{label} at {tuple(pos)} lies outside the domain box", label
                )

    @property
    def trace_path(self) -> str:
        return os.path.join(self.out_dir, self.run_name + ".trc")

    @property
    def reference_trace_path(self) -> str:
        return os.path.join(self.out_dir, self.run_name + ".ref.trc")


def pulse_parameters(config: RunConfig) -> tuple[float, float]:
    """(peak frequency, onset delay) for the configured source.

    The target wavelength is quoted at the background sound speed;
    slower inclusions shorten it locally and are treated as scatterers
    rather than resolved targets.
    """
    c_ref = config.medium.background_c
    f_peak = c_ref / (PULSE_BANDWIDTH * config.source.wavelength_min)
    return f_peak, PULSE_DELAY_PERIODS / f_peak


def make_pulse(profile: str, f_peak: float, delay: float):
    return PULSES[profile](f_peak, delay)


def source_band(config: RunConfig, count: int = 20) -> np.ndarray:
    """Verification frequencies spanning the pulse's energetic band."""
    f_peak, _ = pulse_parameters(config)
    w_peak = 2.0 * math.pi * f_peak
    return frequency_band(SOURCE_BAND[0] * w_peak, SOURCE_BAND[1] * w_peak, count)


# ---------------------------------------------------------------------------
# offline stage


def resolve_cache_dir(config: RunConfig) -> str:
    env = os.environ.get(CACHE_ENV)
    if env:
        return env
    if config.cache_dir is not None:
        return config.cache_dir
    return os.path.join(config.out_dir, "rom_cache")


def _model_cache_key(op, modes_per_face: int, layers: int, shift: float) -> str:
    """Content hash of everything that determines the reduced model.

    Subdomain identity (grid position, neighbor labels) is deliberately
    excluded: two subdomains with the same operator, medium samples,
    face windows, and set of coupled faces produce identical models, so
    they share one cache entry.  Identity is stamped back on at load.
    """
    h = hashlib.sha256()
    h.update(b"sfwave-rom-cache")
    h.update(struct.pack("<III", CACHE_FORMAT, modes_per_face, layers))
    h.update(struct.pack("<d", shift))
    h.update(struct.pack("<3i", *op.shape))
    h.update(struct.pack("<3d", *op.spacing))
    mat = op.matrix
    h.update(np.ascontiguousarray(mat.indptr, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(mat.indices, dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(mat.data, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(op.c, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(op.mu, dtype="<f8").tobytes())
    for f in range(6):
        idx = op.face_nodes[f].indices
        h.update(struct.pack("<q", idx.size))
        h.update(np.ascontiguousarray(idx, dtype="<i8").tobytes())
    h.update(struct.pack("<6B", *(int(f in op.neighbors) for f in range(6))))
    return h.hexdigest()


@dataclass
class OfflineResult:
    model_paths: dict[Alpha, str]
    built: int
    reused: int
    seconds: float


def run_offline(config: RunConfig) -> OfflineResult:
    """Reduce every subdomain, reusing cached models where possible.

    Failures are collected per subdomain and reported together; a
    partial cache left behind by a failed run is still valid because
    entries are content-addressed and written atomically.
    """
    start = time.perf_counter()
    partition = build_partition(config.domain)
    c_field = sample_medium(config.medium, partition)
    cache = resolve_cache_dir(config)
    os.makedirs(cache, exist_ok=True)

    paths: dict[Alpha, str] = {}
    pending: dict[str, tuple[Alpha, object]] = {}
    reused = 0
    failures: list[tuple[Alpha, str, Exception]] = []
    for sub in partition.subdomains:
        try:
            op = assemble_subdomain_operator(partition, sub.alpha, c_field)
            key = _model_cache_key(op, config.modes_per_face, config.layers, config.shift)
        except Exception as exc:  # noqa: BLE001 - reported in aggregate below
            failures.append((sub.alpha, "assemble", exc))
            continue
        path = os.path.join(cache, key + ".rom")
        paths[sub.alpha] = path
        if os.path.exists(path):
            reused += 1
        elif key not in pending:
            pending[key] = (sub.alpha, op)
        else:
            reused += 1

    def build_one(item):
        key, (alpha, op) = item
        try:
            model = build_subdomain_model(
                op, config.modes_per_face, config.layers, config.shift
            )
        except Exception as exc:  # noqa: BLE001
            return alpha, "reduce", exc
        try:
            save_model(os.path.join(cache, key + ".rom"), model)
        except Exception as exc:  # noqa: BLE001
            return alpha, "write", exc
        return None

    items = sorted(pending.items())
    if config.workers > 1 and len(items) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(build_one, items))
    else:
        results = [build_one(it) for it in items]
    failures.extend(r for r in results if r is not None)

    if failures:
        lines = "\n".join(
            f"  {alpha} [{stage}]: {exc}" for alpha, stage, exc in sorted(
                failures, key=lambda t: t[0]
            )
        )
        raise NumericalError(
            f"offline stage failed for {len(failures)} subdomain(s):\n{lines}"
        )
    return OfflineResult(
        model_paths=paths,
        built=len(items),
        reused=reused,
        seconds=time.perf_counter() - start,
    )


def load_models(
    config: RunConfig,
    partition: DomainPartition,
    c_field: np.ndarray,
    need_basis: set[Alpha] = frozenset(),
) -> dict[Alpha, SubdomainModel]:
    """Load the cached models for a run and stamp subdomain identity on.

    The basis is large and only needed where sources or receivers
    live, so it is loaded selectively.  Missing cache entries abort
    with the full list of absent files.
    """
    cache = resolve_cache_dir(config)
    wanted: dict[Alpha, tuple[str, bool]] = {}
    missing = []
    for sub in partition.subdomains:
        op = assemble_subdomain_operator(partition, sub.alpha, c_field)
        key = _model_cache_key(op, config.modes_per_face, config.layers, config.shift)
        path = os.path.join(cache, key + ".rom")
        if not os.path.exists(path):
            missing.append(f"  {sub.alpha}: {path}")
        wanted[sub.alpha] = (path, sub.alpha in need_basis)
    if missing:
        raise DataError(
            "reduced models are missing (run the offline stage first):\n"
            + "\n".join(sorted(set(missing)))
        )
    loaded: dict[tuple[str, bool], SubdomainModel] = {}
    models: dict[Alpha, SubdomainModel] = {}
    for sub in partition.subdomains:
        path, with_basis = wanted[sub.alpha]
        if (path, with_basis) not in loaded:
            loaded[(path, with_basis)] = load_model(path, with_basis=with_basis)
        models[sub.alpha] = replace(
            loaded[(path, with_basis)],
            alpha=sub.alpha,
            lo=sub.lo,
            neighbors=dict(sub.neighbors),
        )
    return models


# ---------------------------------------------------------------------------
# online stage


def _locate_source(partition: DomainPartition, position) -> tuple[Alpha, int]:
    """(subdomain, local row) of the node nearest the source point."""
    ijk = partition.nearest_node(position)
    containing = partition.subdomains_containing(ijk)
    if len(containing) != 1:
        raise ConfigError(
            f"source at {tuple(position)} falls on a subdomain interface "
            f"(node {ijk} is shared by {containing}); move it strictly "
            "inside one subdomain",
            "source.position",
        )
    sub = partition.subdomain(containing[0])
    local = tuple(g - l for g, l in zip(ijk, sub.lo))
    row = int(np.ravel_multi_index(local, sub.shape))
    return sub.alpha, row


def _locate_receivers(
    partition: DomainPartition, line: ReceiverLine
) -> list[tuple[Alpha, int, tuple[int, int, int]]]:
    """(owner subdomain, local row, global node) per receiver."""
    out = []
    for pos in line.positions():
        ijk = partition.nearest_node(pos)
        alpha = partition.owner_of(ijk)
        sub = partition.subdomain(alpha)
        local = tuple(g - l for g, l in zip(ijk, sub.lo))
        out.append((alpha, int(np.ravel_multi_index(local, sub.shape)), ijk))
    return out


@dataclass
class OnlineResult:
    trace_path: str
    meta_path: str
    record: TraceRecord
    meta: dict = field(default_factory=dict)


def _resolve_dt(config: RunConfig, dt_max_coupled: float, converged: bool,
                dt_max_fine: float) -> float:
    if config.dt == "auto":
        if converged:
            return DT_SAFETY * dt_max_coupled
        log.warning(
            "coupled stability estimate did not converge; falling back to "
            "the fine-grid step"
        )
        return DT_SAFETY * dt_max_fine
    if config.dt == "fine":
        return DT_SAFETY * dt_max_fine
    dt = float(config.dt)
    limit = DT_SAFETY * dt_max_coupled
    if dt > limit * (1.0 + 1e-12):
        raise ConfigError(
            f"requested dt {dt:.6e} exceeds the stable limit {limit:.6e}",
            "time.dt",
        )
    return dt


def run_online(config: RunConfig) -> OnlineResult:
    """Integrate the coupled reduced system and record receiver traces."""
    t_start = time.perf_counter()
    partition = build_partition(config.domain)
    c_field = sample_medium(config.medium, partition)

    src_alpha, src_row = _locate_source(partition, config.source.position)
    receivers = _locate_receivers(partition, config.receivers)
    need_basis = {src_alpha} | {alpha for alpha, _, _ in receivers}
    models = load_models(config, partition, c_field, need_basis)
    t_loaded = time.perf_counter()

    lam_hat, converged = cfl_estimate_coupled(models)
    if lam_hat <= 0:
        raise NumericalError("coupled operator has no negative spectrum")
    dt_max_coupled = 2.0 / math.sqrt(lam_hat)
    a_global = assemble_global_operator(partition, c_field)
    dt_max_fine = reference.stability_limit(a_global)
    dt = _resolve_dt(config, dt_max_coupled, converged, dt_max_fine)
    n_steps = max(1, int(math.ceil(config.t_end / dt - 1e-12)))
    t_estimated = time.perf_counter()

    f_peak, delay = pulse_parameters(config)
    pulse = make_pulse(config.source.profile, f_peak, delay)
    source = SourceTerm(
        alpha=src_alpha,
        vector=project_source(models[src_alpha], src_row, config.source.amplitude),
        profile=pulse,
    )
    probes = [make_probe(models[alpha], row) for alpha, row, _ in receivers]

    with CoupledStepper(models, dt, sources=(source,), workers=config.workers) as stp:
        times, rows = stp.run(n_steps, probes=probes, record_every=config.sample_every)
        message_count = stp.message_count
    t_stepped = time.perf_counter()

    coords = np.array([partition.node_coords(ijk) for _, _, ijk in receivers])
    record = TraceRecord(coords=coords, dt=dt * config.sample_every, samples=rows)
    os.makedirs(config.out_dir, exist_ok=True)
    write_traces(config.trace_path, record)

    meta = {
        "run": config.run_name,
        "stage": "online",
        "modes_per_face": config.modes_per_face,
        "layers": config.layers,
        "shift": config.shift,
        "workers": config.workers,
        "dt": dt,
        "steps": n_steps,
        "sample_every": config.sample_every,
        "t_end": config.t_end,
        "pulse_profile": config.source.profile,
        "pulse_peak_frequency": f_peak,
        "pulse_delay": delay,
        "lambda_hat": lam_hat,
        "cfl_converged": converged,
        "dt_max_coupled": dt_max_coupled,
        "dt_max_fine": dt_max_fine,
        "dt_ratio": dt_max_coupled / dt_max_fine,
        "payload_floats_per_message": config.modes_per_face,
        "messages_total": message_count,
        "messages_per_step": message_count // n_steps if n_steps else 0,
        "seconds_load": t_loaded - t_start,
        "seconds_estimate": t_estimated - t_loaded,
        "seconds_step": t_stepped - t_estimated,
    }
    meta_path = os.path.join(config.out_dir, config.run_name + ".meta.txt")
    write_meta(meta_path, meta)
    return OnlineResult(
        trace_path=config.trace_path, meta_path=meta_path, record=record, meta=meta
    )


def run_reference(config: RunConfig) -> OnlineResult:
    """Integrate the undecomposed fine-grid system with the same setup."""
    t_start = time.perf_counter()
    partition = build_partition(config.domain)
    c_field = sample_medium(config.medium, partition)
    a_global = assemble_global_operator(partition, c_field)
    c_flat = c_field.ravel()

    dt_max = reference.stability_limit(a_global)
    dt = float(config.dt) if not isinstance(config.dt, str) else DT_SAFETY * dt_max
    if dt > dt_max * (1.0 + 1e-12):
        raise ConfigError(
            f"requested dt {dt:.6e} exceeds the fine-grid limit {dt_max:.6e}",
            "time.dt",
        )
    n_steps = max(1, int(math.ceil(config.t_end / dt - 1e-12)))

    src_ijk = partition.nearest_node(config.source.position)
    src_row = int(np.ravel_multi_index(src_ijk, partition.global_shape))
    source_vec = np.zeros(a_global.shape[0])
    source_vec[src_row] = config.source.amplitude / c_flat[src_row]

    f_peak, delay = pulse_parameters(config)
    pulse = make_pulse(config.source.profile, f_peak, delay)

    rec_nodes = [partition.nearest_node(p) for p in config.receivers.positions()]
    rec_rows = [int(np.ravel_multi_index(ijk, partition.global_shape)) for ijk in rec_nodes]

    run = reference.run_leapfrog(
        a_global,
        dt,
        n_steps,
        source_vec=source_vec,
        source_fn=pulse,
        record_idx=rec_rows,
        record_every=config.sample_every,
    )
    # The integrator evolves w = u / c; receivers report the field u.
    samples = run.samples * c_flat[rec_rows][None, :]
    coords = np.array([partition.node_coords(ijk) for ijk in rec_nodes])
    record = TraceRecord(coords=coords, dt=dt * config.sample_every, samples=samples)
    os.makedirs(config.out_dir, exist_ok=True)
    write_traces(config.reference_trace_path, record)

    meta = {
        "run": config.run_name,
        "stage": "reference",
        "dt": dt,
        "steps": n_steps,
        "sample_every": config.sample_every,
        "t_end": config.t_end,
        "pulse_profile": config.source.profile,
        "pulse_peak_frequency": f_peak,
        "pulse_delay": delay,
        "dt_max_fine": dt_max,
        "seconds_total": time.perf_counter() - t_start,
    }
    meta_path = os.path.join(config.out_dir, config.run_name + ".ref.meta.txt")
    write_meta(meta_path, meta)
    return OnlineResult(
        trace_path=config.reference_trace_path,
        meta_path=meta_path,
        record=record,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# comparison and export


def compare_traces(a: TraceRecord, b: TraceRecord) -> dict:
    """Relative L2 deviation of ``b`` from ``a`` over the common window.

    The record with the finer sampling is interpolated onto the coarser
    grid; the error is ``|a - b| / |a|`` over all receivers together,
    with per-receiver values alongside.
    """
    if a.coords.shape != b.coords.shape or not np.allclose(
        a.coords, b.coords, rtol=1e-9, atol=1e-9
    ):
        raise DataError("receiver geometry differs between the trace records")
    t_end = min(a.times[-1], b.times[-1])
    if a.dt <= b.dt:
        fine, coarse, swapped = a, b, False
    else:
        fine, coarse, swapped = b, a, True
    t_target = coarse.times[coarse.times <= t_end + 1e-12 * max(t_end, 1.0)]
    on_grid = coarse.samples[: t_target.size]
    resampled = np.column_stack(
        [np.interp(t_target, fine.times, fine.samples[:, r])
         for r in range(fine.samples.shape[1])]
    )
    sa, sb = (resampled, on_grid) if not swapped else (on_grid, resampled)
    diff = sa - sb

    def rel(d, ref):
        denom = float(np.linalg.norm(ref))
        num = float(np.linalg.norm(d))
        if denom == 0.0:
            return 0.0 if num == 0.0 else math.inf
        return num / denom

    per_receiver = [rel(diff[:, r], sa[:, r]) for r in range(diff.shape[1])]
    return {
        "error": rel(diff, sa),
        "per_receiver": per_receiver,
        "window": (0.0, float(t_target[-1]) if t_target.size else 0.0),
        "samples": int(t_target.size),
    }


def export_plot_csv(
    record: TraceRecord,
    path: str,
    window: tuple[float, float] = (0.73, 8.2),
    normalize: bool = True,
) -> str:
    """Write a receiver-line record as CSV for plotting.

    With ``normalize`` each time row is divided by the integral of the
    absolute field along the receiver line, which keeps geometrically
    spreading wavefronts visible at late times.  The normalization is a
    display transform only; comparisons always use raw traces.
    """
    lo, hi = window
    t = record.times
    mask = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if not mask.any():
        raise DataError(
            f"no samples inside the window [{lo}, {hi}] "
            f"(record covers [0, {t[-1]:.4g}])"
        )
    times = t[mask]
    data = record.samples[mask]

    spans = record.coords.max(axis=0) - record.coords.min(axis=0)
    axis = int(np.argmax(spans))
    x = record.coords[:, axis]
    if normalize and data.shape[1] > 1:
        weights = np.trapezoid(np.abs(data), x=x, axis=1)
        cap = float(weights.max())
        if cap > 0.0:
            data = data / np.maximum(weights, 1e-12 * cap)[:, None]
    elif normalize:
        peaks = np.abs(data[:, 0])
        cap = float(peaks.max())
        if cap > 0.0:
            data = data / np.maximum(peaks, 1e-12 * cap)[:, None]

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t"] + [f"x={float(xi)!r}" for xi in x])
        for ti, row in zip(times, data):
            writer.writerow([repr(float(ti))] + [repr(float(v)) for v in row])
    return path


# ---------------------------------------------------------------------------
# verification sweep


def verify_subdomain(
    config: RunConfig,
    alpha: Alpha,
    n_max: int = 5,
    band_count: int = 20,
) -> dict:
    """Transfer-map accuracy of one subdomain's reduction, layer by layer.

    For each depth up to ``n_max`` the projected transfer map is
    compared against the full operator over the pulse's frequency band;
    at the deepest level the three reduced representations (projected
    pair, layer chain, coefficient recursion) are cross-checked.
    """
    partition = build_partition(config.domain)
    c_field = sample_medium(config.medium, partition)
    op = assemble_subdomain_operator(partition, alpha, c_field)
    f = subdomain_inputs(op, config.modes_per_face)
    omegas = source_band(config, band_count)

    def complete_block_projection(n):
        # Mirror the model builder: keep only leading complete blocks,
        # so the measured space is exactly the one a model would use.
        width = f.shape[1]
        basis, sizes = build_krylov_basis(op.matrix, f, n, config.shift)
        keep = 0
        for size in sizes:
            if size != width:
                break
            keep += 1
        basis = basis[:, : keep * width]
        return project_reduced(basis, op.matrix, f)

    rows = []
    for n in range(1, n_max + 1):
        a_tilde, f_tilde = complete_block_projection(n)
        err = band_error(op.matrix, f, a_tilde, f_tilde, omegas)
        rows.append((n, err))

    # Cross-check the chain forms on the possibly truncated depth so
    # they exist even when deflation cut the requested one short.
    model = build_subdomain_model(op, config.modes_per_face, n_max, config.shift)
    a_tilde, f_tilde = complete_block_projection(n_max)
    chain = block_lanczos(a_tilde, f_tilde)
    # All three forms share their poles, so a frequency sitting on one
    # is ill-conditioned in each; probe where the band is farthest from
    # the reduced spectrum.
    poles = np.sqrt(np.maximum(-np.linalg.eigvalsh(a_tilde), 0.0))
    probe = sorted(omegas, key=lambda w: -float(np.min(np.abs(poles - w)) / w))
    agreement = 0.0
    for w in probe[: max(1, band_count // 4)]:
        base = ntd_reduced(a_tilde, f_tilde, w)
        scale = max(float(np.linalg.norm(base)), 1e-300)
        tri = ntd_tridiag(chain.diag_blocks, chain.off_blocks, chain.entry_block, w)
        chn = ntd_chain(model.gammas, model.gamma_hats, w)
        agreement = max(
            agreement,
            float(np.linalg.norm(tri - base)) / scale,
            float(np.linalg.norm(chn - base)) / scale,
        )
    return {
        "alpha": alpha,
        "omegas": omegas,
        "rows": rows,
        "agreement": agreement,
        "truncated": model.truncated,
    }


__all__ = [
    "CACHE_ENV",
    "OfflineResult",
    "OnlineResult",
    "PULSES",
    "ReceiverLine",
    "RunConfig",
    "SourceSpec",
    "compare_traces",
    "export_plot_csv",
    "load_models",
    "make_pulse",
    "pulse_parameters",
    "resolve_cache_dir",
    "run_offline",
    "run_online",
    "run_reference",
    "source_band",
    "verify_subdomain",
]

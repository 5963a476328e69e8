"""Binary file formats for traces and subdomain models, plus run metadata.

Trace files (``.trc``) hold receiver seismograms: a fixed header, the
receiver coordinates, then the samples in step-major order.  Model
files (``.rom``) hold one subdomain's chain model; the node-space basis
is stored last so the online stage can skip it for subdomains that
carry no source or receiver.  Everything is little-endian float64.

Writes go through a temporary file and an atomic rename, so a reader
never sees a half-written file and concurrent writers of identical
content are harmless.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .rom import SubdomainModel

TRACE_MAGIC = b"SFWV"
MODEL_MAGIC = b"SFRM"
TRACE_VERSION = 1
MODEL_VERSION = 1


@dataclass
class TraceRecord:
    """Receiver time series: ``samples[step, receiver]`` at spacing ``dt``."""

    coords: np.ndarray
    dt: float
    samples: np.ndarray

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype="<f8")
        self.samples = np.ascontiguousarray(self.samples, dtype="<f8")
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise DataError("receiver coordinates must be an (n, 3) array")
        if self.samples.ndim != 2 or self.samples.shape[1] != self.coords.shape[0]:
            raise DataError(
                f"samples {self.samples.shape} do not match "
                f"{self.coords.shape[0]} receivers"
            )
        if self.dt <= 0:
            raise DataError("trace sample spacing must be positive")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.samples.shape[0]) * self.dt


def atomic_write(path: str, data: bytes) -> None:
    """Write ``data`` to ``path`` through a same-directory rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    """Sequential parser that turns short reads into DataError."""

    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        end = self.pos + count
        if end > len(self.data):
            raise DataError(f"{self.path}: truncated ({end} > {len(self.data)} bytes)")
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise DataError(
                f"{self.path}: {len(self.data) - self.pos} trailing bytes"
            )


def _read_file(path: str) -> bytes:
    try:
        with open(path, "rb") as handle:
            return handle.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


# -- traces --------------------------------------------------------------


def write_traces(path: str, record: TraceRecord) -> None:
    steps, receivers = record.samples.shape
    parts = [
        TRACE_MAGIC,
        struct.pack("<III", TRACE_VERSION, receivers, steps),
        struct.pack("<d", record.dt),
        record.coords.astype("<f8").tobytes(),
        record.samples.astype("<f8").tobytes(),
    ]
    atomic_write(path, b"".join(parts))


def read_traces(path: str) -> TraceRecord:
    r = _Reader(_read_file(path), path)
    if r.take(4) != TRACE_MAGIC:
        raise DataError(f"{path}: not a trace file (bad magic)")
    version, receivers, steps = r.unpack("<III")
    if version != TRACE_VERSION:
        raise DataError(f"{path}: unsupported trace version {version}")
    (dt,) = r.unpack("<d")
    coords = r.array("<f8", (receivers, 3))
    samples = r.array("<f8", (steps, receivers))
    r.done()
    return TraceRecord(coords=coords, dt=dt, samples=samples)


# -- models ---------------------------------------------------------------


def _pack_index_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<i8")
    return struct.pack("<Q", arr.size) + arr.tobytes()


def save_model(path: str, model: SubdomainModel) -> None:
    if model.basis is None:
        raise DataError("cannot save a model loaded without its basis")
    width = model.width
    n_nodes = int(np.prod(model.shape))
    parts = [
        MODEL_MAGIC,
        struct.pack("<I", MODEL_VERSION),
        struct.pack("<3i", *model.alpha),
        struct.pack("<3q", *model.lo),
        struct.pack("<3i", *model.shape),
        struct.pack("<3d", *model.spacing),
        struct.pack("<IId", model.modes_per_face, model.layers, model.shift),
        struct.pack("<BB", int(model.deflated), int(model.truncated)),
        struct.pack("<I", len(model.neighbors)),
    ]
    for face in sorted(model.neighbors):
        parts.append(struct.pack("<B3i", face, *model.neighbors[face]))
    for face in range(6):
        parts.append(_pack_index_array(model.face_indices[face]))
    for stack in (model.gammas, model.gamma_hats, model.scales):
        expect = (model.layers, width, width)
        if stack.shape != expect:
            raise DataError(f"chain stack shape {stack.shape}, expected {expect}")
        parts.append(np.ascontiguousarray(stack, dtype="<f8").tobytes())
    for field in (model.c, model.mu):
        if field.shape != (n_nodes,):
            raise DataError(f"node field shape {field.shape}, expected ({n_nodes},)")
        parts.append(np.ascontiguousarray(field, dtype="<f8").tobytes())
    basis = np.ascontiguousarray(model.basis, dtype="<f8")
    if basis.shape != (n_nodes, model.layers * width):
        raise DataError(
            f"basis shape {basis.shape}, expected ({n_nodes}, {model.layers * width})"
        )
    parts.append(struct.pack("<Q", basis.nbytes))
    parts.append(basis.tobytes())
    atomic_write(path, b"".join(parts))


def load_model(path: str, with_basis: bool = True) -> SubdomainModel:
    """Read a subdomain model; skip the trailing basis when not needed."""
    r = _Reader(_read_file(path), path)
    if r.take(4) != MODEL_MAGIC:
        raise DataError(f"{path}: not a model file (bad magic)")
    (version,) = r.unpack("<I")
    if version != MODEL_VERSION:
        raise DataError(f"{path}: unsupported model version {version}")
    alpha = tuple(r.unpack("<3i"))
    lo = tuple(r.unpack("<3q"))
    shape = tuple(r.unpack("<3i"))
    spacing = tuple(r.unpack("<3d"))
    modes_per_face, layers, shift = r.unpack("<IId")
    deflated, truncated = r.unpack("<BB")
    (n_neighbors,) = r.unpack("<I")
    neighbors = {}
    for _ in range(n_neighbors):
        face, ax, ay, az = r.unpack("<B3i")
        neighbors[int(face)] = (ax, ay, az)
    face_indices = []
    for _ in range(6):
        (count,) = r.unpack("<Q")
        face_indices.append(r.array("<i8", (count,)))
    width = 6 * modes_per_face
    n_nodes = int(np.prod(shape))
    gammas = r.array("<f8", (layers, width, width))
    gamma_hats = r.array("<f8", (layers, width, width))
    scales = r.array("<f8", (layers, width, width))
    c = r.array("<f8", (n_nodes,))
    mu = r.array("<f8", (n_nodes,))
    (basis_bytes,) = r.unpack("<Q")
    expect = n_nodes * layers * width * 8
    if basis_bytes != expect:
        raise DataError(f"{path}: basis block is {basis_bytes} bytes, expected {expect}")
    if with_basis:
        basis = r.array("<f8", (n_nodes, layers * width))
        r.done()
    else:
        basis = None
    return SubdomainModel(
        alpha=alpha,
        lo=lo,
        shape=shape,
        spacing=spacing,
        modes_per_face=int(modes_per_face),
        layers=int(layers),
        shift=float(shift),
        neighbors=neighbors,
        face_indices=tuple(face_indices),
        gammas=gammas,
        gamma_hats=gamma_hats,
        scales=scales,
        basis=basis,
        c=c,
        mu=mu,
        deflated=bool(deflated),
        truncated=bool(truncated),
    )


# -- run metadata ----------------------------------------------------------


def write_meta(path: str, fields: dict) -> None:
    """Plain ``key: value`` report, one line per entry, insertion order."""
    lines = []
    for key, value in fields.items():
        if isinstance(value, float):
            # float() strips numpy scalar wrappers so repr stays plain.
            text = repr(float(value))
        else:
            text = str(value)
        if "\n" in key or "\n" in text:
            raise DataError(f"metadata entry {key!r} contains a newline")
        lines.append(f"{key}: {text}\n")
    atomic_write(path, "".join(lines).encode())


def read_meta(path: str) -> dict[str, str]:
    text = _read_file(path).decode()
    fields: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if ": " not in line:
            raise DataError(f"{path}:{lineno}: expected 'key: value'")
        key, value = line.split(": ", 1)
        fields[key] = value
    return fields

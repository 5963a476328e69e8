"""Binary trace and model files: round trips, laziness, corruption."""

import dataclasses
import os

import numpy as np
import pytest

from sfwave.errors import DataError
from sfwave.grid import (
    DomainSpec,
    MediumModel,
    assemble_subdomain_operator,
    build_partition,
    sample_medium,
)
from sfwave.io import (
    TraceRecord,
    atomic_write,
    load_model,
    read_meta,
    read_traces,
    save_model,
    write_meta,
    write_traces,
)
from sfwave.rom import build_subdomain_model


def sample_record(steps=7, receivers=3, seed=0):
    rng = np.random.default_rng(seed)
    return TraceRecord(
        coords=rng.random((receivers, 3)),
        dt=0.0125,
        samples=rng.standard_normal((steps, receivers)),
    )


def sample_model(m=4, n=2):
    spec = DomainSpec((2.0, 1.0, 1.0), (2, 1, 1), (7, 7, 7))
    part = build_partition(spec)
    c = sample_medium(MediumModel(1.0), part)
    op = assemble_subdomain_operator(part, (1, 0, 0), c)
    return build_subdomain_model(op, m, n, 4.0)


def test_trace_round_trip_is_bit_exact(tmp_path):
    rec = sample_record()
    path = str(tmp_path / "a.trc")
    write_traces(path, rec)
    back = read_traces(path)
    assert back.dt == rec.dt
    assert np.array_equal(back.coords, rec.coords)
    assert np.array_equal(back.samples, rec.samples)


def test_trace_write_is_deterministic(tmp_path):
    rec = sample_record()
    p1, p2 = str(tmp_path / "a.trc"), str(tmp_path / "b.trc")
    write_traces(p1, rec)
    write_traces(p2, rec)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_truncated_trace_rejected(tmp_path):
    path = str(tmp_path / "a.trc")
    write_traces(path, sample_record())
    data = open(path, "rb").read()
    open(path, "wb").write(data[:-9])
    with pytest.raises(DataError):
        read_traces(path)


def test_trailing_garbage_rejected(tmp_path):
    path = str(tmp_path / "a.trc")
    write_traces(path, sample_record())
    with open(path, "ab") as fh:
        fh.write(b"\x00" * 4)
    with pytest.raises(DataError):
        read_traces(path)


def test_wrong_magic_rejected(tmp_path):
    path = str(tmp_path / "a.trc")
    write_traces(path, sample_record())
    data = bytearray(open(path, "rb").read())
    data[:4] = b"XXXX"
    open(path, "wb").write(bytes(data))
    with pytest.raises(DataError):
        read_traces(path)


def test_model_round_trip(tmp_path):
    model = sample_model()
    path = str(tmp_path / "m.rom")
    save_model(path, model)
    back = load_model(path)
    assert back.alpha == model.alpha
    assert back.lo == model.lo
    assert back.shape == model.shape
    assert back.neighbors == model.neighbors
    assert back.modes_per_face == model.modes_per_face
    assert back.layers == model.layers
    assert back.shift == model.shift
    assert back.deflated == model.deflated
    assert back.truncated == model.truncated
    for f in range(6):
        assert np.array_equal(back.face_indices[f], model.face_indices[f])
    assert np.array_equal(back.gammas, model.gammas)
    assert np.array_equal(back.gamma_hats, model.gamma_hats)
    assert np.array_equal(back.scales, model.scales)
    assert np.array_equal(back.c, model.c)
    assert np.array_equal(back.mu, model.mu)
    assert np.array_equal(back.basis, model.basis)


def test_model_loads_without_basis(tmp_path):
    model = sample_model()
    path = str(tmp_path / "m.rom")
    save_model(path, model)
    slim = load_model(path, with_basis=False)
    assert slim.basis is None
    assert np.array_equal(slim.gammas, model.gammas)


def test_model_without_basis_cannot_be_saved(tmp_path):
    model = dataclasses.replace(sample_model(), basis=None)
    with pytest.raises(DataError):
        save_model(str(tmp_path / "m.rom"), model)


def test_model_file_truncation_rejected(tmp_path):
    path = str(tmp_path / "m.rom")
    save_model(path, sample_model())
    data = open(path, "rb").read()
    open(path, "wb").write(data[: len(data) // 2])
    with pytest.raises(DataError):
        load_model(path)


def test_atomic_write_replaces_whole_file(tmp_path):
    path = str(tmp_path / "f.bin")
    atomic_write(path, b"long initial contents")
    atomic_write(path, b"ok")
    assert open(path, "rb").read() == b"ok"
    assert os.listdir(tmp_path) == ["f.bin"]


def test_meta_round_trip(tmp_path):
    path = str(tmp_path / "run.meta.txt")
    fields = {"run": "demo", "dt": 0.012345678901234567, "steps": 420, "flag": True}
    write_meta(path, fields)
    back = read_meta(path)
    assert list(back) == list(fields)
    assert back["run"] == "demo"
    assert float(back["dt"]) == fields["dt"]
    assert int(back["steps"]) == 420
    assert back["flag"] == "True"


def test_meta_rejects_newlines(tmp_path):
    with pytest.raises(DataError):
        write_meta(str(tmp_path / "m.txt"), {"key": "a\nb"})


def test_trace_record_validates_shapes():
    rec = sample_record()
    with pytest.raises(DataError):
        TraceRecord(coords=rec.coords[:, :2], dt=rec.dt, samples=rec.samples)
    with pytest.raises(DataError):
        TraceRecord(coords=rec.coords, dt=-1.0, samples=rec.samples)
    with pytest.raises(DataError):
        TraceRecord(coords=rec.coords, dt=rec.dt, samples=rec.samples[:, :2])

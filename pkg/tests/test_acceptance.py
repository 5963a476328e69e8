"""Acceptance gates for the coupled reduced-order wave solver.

One test per criterion.  Each prints a single pass/fail line with the
measured quantity and its tolerance; the assertion mirrors that line.
The full-size completion run is opt-in (SFWAVE_RUN_FULL=1) because it
builds models for over a hundred subdomains.
"""

import math
import os
import time

import numpy as np
import pytest

from sfwave.grid import (
    Box,
    DomainSpec,
    MediumModel,
    assemble_subdomain_operator,
    build_partition,
    sample_medium,
)
from sfwave.io import read_traces
from sfwave.ntd import ntd_chain, ntd_full, ntd_reduced, ntd_tridiag
from sfwave.reference import stability_limit
from sfwave.rom import (
    block_lanczos,
    build_krylov_basis,
    build_subdomain_model,
    project_reduced,
    project_state,
    sfraction_transform,
    subdomain_inputs,
)
from sfwave.sim import (
    PULSE_BANDWIDTH,
    SOURCE_BAND,
    ReceiverLine,
    RunConfig,
    SourceSpec,
    compare_traces,
    run_offline,
    run_online,
    run_reference,
)
from sfwave.stepper import CoupledStepper, stable_step_coupled


def report(capsys, num, label, ok, detail):
    # Emit the line outside capture so it shows up in the live run log.
    with capsys.disabled():
        print(f"\ncriterion {num} ({label}): {'PASS' if ok else 'FAIL'} - {detail}")


@pytest.fixture(autouse=True, scope="module")
def isolated_cache_env():
    # A user-level cache override would couple the determinism runs.
    old = os.environ.pop("SFWAVE_CACHE_DIR", None)
    yield
    if old is not None:
        os.environ["SFWAVE_CACHE_DIR"] = old


def complete_block_projection(matrix, f, n, shift):
    """Krylov projection truncated to leading complete blocks."""
    width = f.shape[1]
    basis, sizes = build_krylov_basis(matrix, f, n, shift)
    keep = 0
    for size in sizes:
        if size != width:
            break
        keep += 1
    basis = basis[:, : keep * width]
    return project_reduced(basis, matrix, f)


# ---------------------------------------------------------------------------
# criterion 1: the reduced transfer map is one object in four forms


def layer_system_map(chain, omega):
    # Independent oracle: assemble the three-term layer equations with a
    # zero closure layer and read the map off the first layer block.
    width = chain.entry_block.shape[0]
    layers = len(chain.diag_blocks)
    eye = np.eye(width)
    big = np.zeros((layers * width, layers * width))
    for j in range(layers):
        blk = slice(j * width, (j + 1) * width)
        big[blk, blk] = chain.diag_blocks[j] + omega * omega * eye
        if j + 1 < layers:
            nxt = slice((j + 1) * width, (j + 2) * width)
            big[nxt, blk] = chain.off_blocks[j]
            big[blk, nxt] = chain.off_blocks[j].T
    rhs = np.zeros((layers * width, width))
    rhs[:width] = chain.entry_block
    w1 = np.linalg.solve(big, rhs)[:width]
    out = chain.entry_block.T @ w1
    return 0.5 * (out + out.T)


def test_criterion_1_representation_equivalence(capsys):
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        n_dim = int(rng.integers(12, 61))
        m = int(rng.integers(1, 3))
        n = int(rng.integers(1, 5))
        q, _ = np.linalg.qr(rng.standard_normal((n_dim, n_dim)))
        lam = -(0.05 + 5.0 * rng.random(n_dim))
        a = (q * lam) @ q.T
        a = 0.5 * (a + a.T)
        f, _ = np.linalg.qr(rng.standard_normal((n_dim, m)))
        shift = float(0.5 + 2.0 * rng.random())

        a_t, f_t = complete_block_projection(a, f, n, shift)
        chain = block_lanczos(a_t, f_t)
        gammas, hats, _ = sfraction_transform(
            chain.diag_blocks, chain.off_blocks, chain.entry_block
        )
        gammas, hats = np.stack(gammas), np.stack(hats)

        # Probe away from the reduced poles; equality of the forms is an
        # identity, but relative error is meaningless on a resonance.
        poles = np.sqrt(np.maximum(-np.linalg.eigvalsh(a_t), 0.0))
        omegas = [
            w
            for w in np.geomspace(0.05, 3.0, 9)
            if np.min(np.abs(poles - w)) > 2e-2 * max(w, 1.0)
        ] or [0.01]
        for omega in omegas:
            reduced = ntd_reduced(a_t, f_t, omega)
            scale = max(float(np.linalg.norm(reduced)), 1e-300)
            tri = ntd_tridiag(
                chain.diag_blocks, chain.off_blocks, chain.entry_block, omega
            )
            layered = layer_system_map(chain, omega)
            fraction = ntd_chain(gammas, hats, omega)
            for other in (tri, layered, fraction):
                dev = float(np.linalg.norm(other - reduced)) / scale
                worst = max(worst, dev)
    elapsed = time.perf_counter() - start

    ok = worst <= 1e-10 and elapsed < 10.0
    report(
        capsys, 1, "representation equivalence", ok,
        f"max relative deviation {worst:.2e} (tol 1e-10) over 50 instances "
        f"in {elapsed:.1f}s (< 10s)",
    )
    assert worst <= 1e-10
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# criterion 2: spectral convergence of the reduced face transfer map


def test_criterion_2_spectral_convergence(capsys):
    start = time.perf_counter()
    spec = DomainSpec((1.0, 1.0, 1.0), (1, 1, 1), (10, 10, 10))
    partition = build_partition(spec)
    c_field = sample_medium(MediumModel(1.0), partition)
    op = assemble_subdomain_operator(partition, (0, 0, 0), c_field)
    modes = 4
    f = subdomain_inputs(op, modes)

    wavelength = 6.0 / 9.0  # six grid steps at this resolution
    f_peak = 1.0 / (PULSE_BANDWIDTH * wavelength)
    omegas = np.geomspace(
        SOURCE_BAND[0] * 2.0 * math.pi * f_peak,
        SOURCE_BAND[1] * 2.0 * math.pi * f_peak,
        20,
    )
    exact = [ntd_full(op.matrix, f, w) for w in omegas]
    norms = [max(float(np.linalg.norm(e)), 1e-300) for e in exact]

    errors = []
    for n in range(1, 6):
        a_t, f_t = complete_block_projection(op.matrix, f, n, 4.0)
        worst = max(
            float(np.linalg.norm(ntd_reduced(a_t, f_t, w) - e)) / s
            for w, e, s in zip(omegas, exact, norms)
        )
        errors.append(worst)
    elapsed = time.perf_counter() - start

    monotone = all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))
    ok = monotone and errors[-1] < 1e-3 and elapsed < 120.0
    chain = " ".join(f"{e:.2e}" for e in errors)
    report(
        capsys, 2, "spectral convergence of the face transfer map", ok,
        f"errors [{chain}] non-increasing={monotone}, final {errors[-1]:.2e} "
        f"(tol 1e-3) in {elapsed:.1f}s (< 120s)",
    )
    assert monotone
    assert errors[-1] < 1e-3
    assert elapsed < 120.0


# ---------------------------------------------------------------------------
# criterion 3: chain coefficients stay positive on a uniform 1D medium


def test_criterion_3_scalar_chain_positivity(capsys):
    nodes = 50
    h = 1.0 / nodes
    main = np.full(nodes, -2.0)
    main[0] = -1.0  # flux input end
    a = (
        np.diag(main)
        + np.diag(np.ones(nodes - 1), 1)
        + np.diag(np.ones(nodes - 1), -1)
    ) / (h * h)
    f = np.zeros((nodes, 1))
    f[0, 0] = 1.0

    smallest = math.inf
    for n in range(1, 6):
        a_t, f_t = complete_block_projection(a, f, n, 4.0)
        chain = block_lanczos(a_t, f_t)
        gammas, hats, _ = sfraction_transform(
            chain.diag_blocks, chain.off_blocks, chain.entry_block
        )
        for g, gh in zip(gammas, hats):
            smallest = min(smallest, float(g[0, 0]), float(gh[0, 0]))

    ok = smallest > 0.0
    report(
        capsys, 3, "scalar chain positivity", ok,
        f"min coefficient {smallest:.3e} > 0 over n=1..5 "
        "(all links and inverse masses, hence all their inverses)",
    )
    assert smallest > 0.0


# ---------------------------------------------------------------------------
# criterion 4: discrete energy of the coupled scheme is conserved


@pytest.fixture(scope="module")
def coupled_pair():
    """Two coupled uniform subdomains with a projected Gaussian start."""
    spec = DomainSpec((2.0, 1.0, 1.0), (2, 1, 1), (9, 9, 9))
    partition = build_partition(spec)
    c_field = sample_medium(MediumModel(1.0), partition)
    models = {}
    for alpha in ((0, 0, 0), (1, 0, 0)):
        op = assemble_subdomain_operator(partition, alpha, c_field)
        models[alpha] = build_subdomain_model(op, 4, 3, 4.0)
    dt_max, _, converged = stable_step_coupled(models)

    center = np.array([0.5, 0.5, 0.5])
    u0 = {}
    for alpha, model in models.items():
        idx = np.indices(model.shape).reshape(3, -1)
        xyz = (np.asarray(model.lo)[:, None] + idx) * np.asarray(model.spacing)[:, None]
        bump = np.exp(-np.sum((xyz - center[:, None]) ** 2, axis=0) / 0.18**2)
        w = np.sqrt(model.mu) * bump / model.c
        u0[alpha] = project_state(model, w)
    return {"models": models, "dt": 0.9 * dt_max, "u0": u0, "converged": converged}


def energy_run(pair, steps, workers):
    with CoupledStepper(pair["models"], pair["dt"], workers=workers) as stepper:
        stepper.initialize(u0=pair["u0"])
        e0 = stepper.energy()
        drift = 0.0
        for _ in range(steps):
            stepper.advance()
            drift = max(drift, abs(stepper.energy() - e0) / abs(e0))
        final = b"".join(stepper.u_curr[a].tobytes() for a in stepper.order)
    return drift, final


def test_criterion_4_energy_stability(coupled_pair, capsys):
    drift, _ = energy_run(coupled_pair, 1000, workers=1)
    ok = drift < 1e-6
    report(
        capsys, 4, "coupled energy conservation", ok,
        f"relative drift {drift:.2e} (tol 1e-6) over 1000 steps at 0.9 dt_max",
    )
    assert drift < 1e-6


# ---------------------------------------------------------------------------
# criteria 5 and 6: trace accuracy against the fine-grid reference


def c5_config(root, workers=1):
    h = 1.0 / 11.0
    return RunConfig(
        domain=DomainSpec((2.0, 1.0, 1.0), (2, 1, 1), (12, 12, 12)),
        medium=MediumModel(1.0),
        modes_per_face=9,
        layers=3,
        source=SourceSpec(position=(6 * h, 6 * h, 6 * h), wavelength_min=1.1),
        receivers=ReceiverLine(origin=(4 * h, 2 * h, 2 * h), axis=0, count=5, spacing=4 * h),
        t_end=3.5,
        out_dir=str(root / "out"),
        run_name="pair",
        cache_dir=str(root / "cache"),
        workers=workers,
    )


def c6_config(root, workers=1):
    h = 1.0 / 11.0
    # Staircase low-velocity channel (contrast 10/3) marching across
    # subdomain interfaces in x and y.
    regions = tuple(
        (
            Box(
                (0.55 + j * 0.35, j * 0.5, 0.0),
                (0.73 + j * 0.35, (j + 1) * 0.5, 2.0),
            ),
            0.3,
        )
        for j in range(8)
    )
    wavelength = 6.0 / (6.0 * 9.0 * 3.0) ** (1.0 / 3.0)
    return RunConfig(
        domain=DomainSpec((4.0, 4.0, 2.0), (4, 4, 2), (12, 12, 12)),
        medium=MediumModel(1.0, regions),
        modes_per_face=9,
        layers=3,
        source=SourceSpec(position=(27 * h, 16 * h, 6 * h), wavelength_min=wavelength),
        receivers=ReceiverLine(origin=(4 * h, 0.0, 6 * h), axis=0, count=10, spacing=4 * h),
        t_end=7.0,
        out_dir=str(root / "out"),
        run_name="stair",
        cache_dir=str(root / "cache"),
        workers=workers,
    )


def run_pipeline(config):
    run_offline(config)
    online = run_online(config)
    reference = run_reference(config)
    rep = compare_traces(
        read_traces(online.trace_path), read_traces(reference.trace_path)
    )
    with open(online.trace_path, "rb") as fh:
        trace = fh.read()
    return online, rep, trace


@pytest.fixture(scope="module")
def c5_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pair")
    start = time.perf_counter()
    online, rep, trace = run_pipeline(c5_config(root))
    elapsed = time.perf_counter() - start
    return {"meta": online.meta, "error": rep["error"], "trace": trace, "elapsed": elapsed}


@pytest.fixture(scope="module")
def c6_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("stair")
    start = time.perf_counter()
    online, rep, trace = run_pipeline(c6_config(root))
    elapsed = time.perf_counter() - start
    return {"meta": online.meta, "error": rep["error"], "trace": trace, "elapsed": elapsed}


def test_criterion_5_two_subdomain_transmission(c5_run, capsys):
    error = c5_run["error"]
    ok = error <= 0.02
    report(
        capsys, 5, "two-subdomain transmission accuracy", ok,
        f"relative L2 trace error {100 * error:.3f}% (tol 2%), receivers in "
        "both subdomains",
    )
    assert error <= 0.02


def test_criterion_6_heterogeneous_desk_scale(c6_run, capsys):
    error = c6_run["error"]
    elapsed = c6_run["elapsed"]
    ok = error <= 0.05 and elapsed < 900.0
    report(
        capsys, 6, "heterogeneous desk-scale accuracy", ok,
        f"relative L2 trace error {100 * error:.3f}% (tol 5%) at ~6 reduced "
        f"DOF per wavelength, contrast 10/3, in {elapsed:.0f}s (< 900s)",
    )
    assert error <= 0.05
    assert elapsed < 900.0


# ---------------------------------------------------------------------------
# criterion 7: message counters from the heterogeneous run


def test_criterion_7_communication_economy(c6_run, capsys):
    meta = c6_run["meta"]
    counts = (4, 4, 2)
    pairs = 0
    for axis in range(3):
        others = [counts[a] for a in range(3) if a != axis]
        pairs += (counts[axis] - 1) * others[0] * others[1]
    expected_per_step = 2 * pairs  # one message each way per shared face

    per_step = meta["messages_per_step"]
    payload = meta["payload_floats_per_message"]
    total = meta["messages_total"]
    steps = meta["steps"]
    ok = (
        per_step == expected_per_step
        and payload == 9
        and total == steps * expected_per_step
    )
    report(
        capsys, 7, "communication economy", ok,
        f"{per_step} messages/step (expect {expected_per_step}), {payload} "
        f"floats each (expect 9), {total} total over {steps} steps",
    )
    assert per_step == expected_per_step
    assert payload == 9
    assert total == steps * expected_per_step


# ---------------------------------------------------------------------------
# criterion 8: the reduced system does not shrink the stable step


def test_criterion_8_stable_step_containment(capsys):
    spec = DomainSpec((1.0, 1.0, 1.0), (1, 1, 1), (12, 12, 12))
    partition = build_partition(spec)
    c_field = sample_medium(MediumModel(1.0), partition)
    op = assemble_subdomain_operator(partition, (0, 0, 0), c_field)
    model = build_subdomain_model(op, 9, 3, 4.0)

    dt_fine = stability_limit(op.matrix)
    dt_reduced, _, _ = stable_step_coupled({(0, 0, 0): model})
    ratio = dt_reduced / dt_fine

    ok = ratio >= 1.0
    report(
        capsys, 8, "stable step containment", ok,
        f"dt_max(reduced)/dt_max(fine) = {ratio:.3f} >= 1 on a uniform subdomain",
    )
    assert ratio >= 1.0


# ---------------------------------------------------------------------------
# criterion 9: outputs do not depend on the worker count


def test_criterion_9_worker_determinism(
    coupled_pair, c5_run, c6_run, tmp_path_factory, capsys
):
    counts = sorted({1, 2, os.cpu_count() or 1})
    mismatches = []

    _, base_state = energy_run(coupled_pair, 300, workers=1)
    for k in counts[1:]:
        _, state = energy_run(coupled_pair, 300, workers=k)
        if state != base_state:
            mismatches.append(f"energy run @ {k} workers")

    for name, factory, base in (
        ("transmission", c5_config, c5_run["trace"]),
        ("staircase", c6_config, c6_run["trace"]),
    ):
        for k in counts[1:]:
            root = tmp_path_factory.mktemp(f"det_{name}_{k}")
            config = factory(root, workers=k)
            run_offline(config)
            online = run_online(config)
            with open(online.trace_path, "rb") as fh:
                trace = fh.read()
            if trace != base:
                mismatches.append(f"{name} traces @ {k} workers")

    ok = not mismatches
    detail = (
        f"byte-identical outputs across worker counts {counts}"
        if ok
        else "mismatches: " + ", ".join(mismatches)
    )
    report(capsys, 9, "worker-count determinism", ok, detail)
    assert not mismatches


# ---------------------------------------------------------------------------
# optional: full-size configuration runs to completion


@pytest.mark.skipif(
    not os.environ.get("SFWAVE_RUN_FULL"),
    reason="full-size completion run is opt-in; set SFWAVE_RUN_FULL=1",
)
def test_criterion_6_full_size_completion(tmp_path, capsys):
    h = 1.0 / 19.0
    regions = tuple(
        (
            Box(
                (0.55 + j * 0.45, j * 0.5, 0.0),
                (0.85 + j * 0.45, (j + 1) * 0.5, 3.0),
            ),
            0.3,
        )
        for j in range(14)
    )
    config = RunConfig(
        domain=DomainSpec((7.0, 7.0, 3.0), (7, 7, 3), (20, 20, 20)),
        medium=MediumModel(1.0, regions),
        modes_per_face=25,
        layers=3,
        source=SourceSpec(position=(3.5, 1.5, 1.5), wavelength_min=0.78),
        receivers=ReceiverLine(origin=(4 * h, 2 * h, 9 * h), axis=0, count=12, spacing=4 * h),
        t_end=12.5,
        out_dir=str(tmp_path / "out"),
        run_name="full",
        cache_dir=str(tmp_path / "cache"),
    )
    start = time.perf_counter()
    offline = run_offline(config)
    online = run_online(config)
    elapsed = time.perf_counter() - start

    record = read_traces(online.trace_path)
    finite = bool(np.all(np.isfinite(record.samples)))
    ok = finite and online.meta["steps"] > 0
    report(
        capsys, 6, "full-size completion (optional)", ok,
        f"offline built {offline.built} models ({offline.reused} reused), "
        f"online {online.meta['steps']} steps, finite traces, in {elapsed:.0f}s",
    )
    assert finite
    assert online.meta["steps"] > 0

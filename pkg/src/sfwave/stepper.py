"""Coupled explicit time stepping of the reduced chain variables.

Each subdomain evolves its layered state U_1..U_L; neighbours interact
only through layer 1.  A step has three phases:

1. every subdomain computes its outgoing flux (link matrix applied to
   the first layer difference) and each shared face exchanges the two
   m-value slices of it,
2. interior layers update locally,
3. shared face segments update from the summed fluxes through the
   precomputed pairwise mass matrix and are written identically into
   both neighbours, keeping the replicas bitwise equal.

Exterior faces use the one-sided first-row update (reflecting outer
boundary).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InstabilityError, NumericalError, ProtocolError
from .grid import opposite_face
from .reference import CFL_SAFETY, GROWTH_LIMIT, POWER_MAX_ITER, POWER_TOL
from .rom import SubdomainModel

log = logging.getLogger(__name__)

Alpha = tuple[int, int, int]


@dataclass(frozen=True)
class FaceMessage:
    """One face's outgoing flux slice for one step."""

    sender: Alpha
    face: int
    step: int
    payload: np.ndarray


@dataclass(frozen=True)
class SourceTerm:
    """Additive forcing: profile(t) times a fixed state-space vector."""

    alpha: Alpha
    vector: np.ndarray
    profile: Callable[[float], float]


@dataclass(frozen=True)
class Probe:
    """Linear functional of one subdomain's state (a receiver)."""

    alpha: Alpha
    weights: np.ndarray


@dataclass(frozen=True)
class Interface:
    low: Alpha
    low_face: int
    high: Alpha
    high_face: int
    mass: np.ndarray          # (inv(Ghat_low|f) + inv(Ghat_high|f))^-1


def chain_operator(model: SubdomainModel) -> np.ndarray:
    """Dense isolated-subdomain operator: U -> d2U/dt2, all faces exterior."""
    width = model.width
    layers = model.layers
    op = np.zeros((layers * width, layers * width))
    for j in range(layers):
        blk = slice(j * width, (j + 1) * width)
        gamma_prev = model.gammas[j - 1] if j > 0 else np.zeros((width, width))
        op[blk, blk] = -model.gamma_hats[j] @ (model.gammas[j] + gamma_prev)
        if j > 0:
            prv = slice((j - 1) * width, j * width)
            op[blk, prv] = model.gamma_hats[j] @ gamma_prev
        if j + 1 < layers:
            nxt = slice((j + 1) * width, (j + 2) * width)
            op[blk, nxt] = model.gamma_hats[j] @ model.gammas[j]
    return op


def project_source(model: SubdomainModel, local_row: int, amplitude: float = 1.0) -> np.ndarray:
    """State-space forcing vector for a point source at a local node.

    The node must be strictly owned (ownership fraction 1); interface
    nodes are ambiguous and rejected.  The first layer block vanishes
    identically because the face inputs are supported on faces only; it
    is zeroed after an explicit check.
    """
    if model.basis is None:
        raise NumericalError("model was loaded without its node-space basis")
    if model.mu[local_row] < 1.0:
        raise ConfigError(
            "source node lies on a subdomain interface (ambiguous ownership); "
            "move it strictly inside one subdomain"
        )
    node = np.zeros(model.basis.shape[0])
    node[local_row] = amplitude / model.c[local_row]
    coeff = model.basis.T @ node
    if np.linalg.norm(coeff) <= 1e-12 * np.linalg.norm(node):
        log.warning(
            "source at local node %d of subdomain %s is nearly orthogonal to "
            "the reduction space; it will be silent",
            local_row,
            model.alpha,
        )
    width = model.width
    first = float(np.linalg.norm(coeff[:width]))
    if first > 1e-8 * max(float(np.linalg.norm(coeff)), 1e-300):
        raise NumericalError(
            "interior source leaked into the boundary layer block "
            f"(norm {first:.2e}); the reduction basis is inconsistent"
        )
    coeff[:width] = 0.0
    out = np.empty_like(coeff)
    for j in range(model.layers):
        blk = slice(j * width, (j + 1) * width)
        out[blk] = model.scales[j] @ coeff[blk]
    return out


def make_probe(model: SubdomainModel, local_row: int) -> Probe:
    """Receiver functional returning the physical field at a local node."""
    if model.basis is None:
        raise NumericalError("model was loaded without its node-space basis")
    width = model.width
    weights = np.empty(model.state_size)
    for j in range(model.layers):
        blk = slice(j * width, (j + 1) * width)
        weights[blk] = np.linalg.solve(model.scales[j].T, model.basis[local_row, blk])
    scale = model.c[local_row] / np.sqrt(model.mu[local_row])
    return Probe(alpha=model.alpha, weights=weights * scale)


class CoupledStepper:
    """Leapfrog integrator for a set of coupled subdomain models."""

    def __init__(
        self,
        models: dict[Alpha, SubdomainModel],
        dt: float,
        sources: Sequence[SourceTerm] = (),
        workers: int = 1,
    ):
        if dt <= 0:
            raise ConfigError(f"time step must be positive, got {dt}")
        self.models = dict(models)
        self.order: list[Alpha] = sorted(self.models)
        self.dt = float(dt)
        self.sources = tuple(sources)
        self.workers = max(1, int(workers))
        for src in self.sources:
            if src.alpha not in self.models:
                raise ConfigError(f"source subdomain {src.alpha} has no model")

        self.interfaces = self._pair_interfaces()
        self.message_count = 0
        self.steps_done = 0
        self.time = 0.0
        self.u_prev: dict[Alpha, np.ndarray] = {}
        self.u_curr: dict[Alpha, np.ndarray] = {}
        self._baseline = 0.0
        self._pool = (
            ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        )

    # -- setup ---------------------------------------------------------

    def _pair_interfaces(self) -> list[Interface]:
        pairs = []
        for alpha in self.order:
            model = self.models[alpha]
            if np.linalg.norm(model.gamma_hats[0] - np.eye(model.width)) > 1e-8:
                raise NumericalError(
                    f"subdomain {alpha}: first inverse-mass block is not the "
                    "identity; the face updates would couple across faces"
                )
            for face, beta in sorted(model.neighbors.items()):
                if beta not in self.models:
                    raise ProtocolError(
                        f"subdomain {alpha} expects a neighbour {beta} across "
                        f"face {face} but no model was provided"
                    )
                other = self.models[beta]
                back = other.neighbors.get(opposite_face(face))
                if back != alpha:
                    raise ProtocolError(
                        f"inconsistent neighbour tables: {alpha} face {face} "
                        f"points to {beta}, whose opposite face points to {back}"
                    )
                if other.modes_per_face != model.modes_per_face:
                    raise ProtocolError(
                        f"mode count mismatch across interface {alpha}|{beta}"
                    )
                if alpha < beta:
                    sl_a = self.models[alpha].face_slice(face)
                    sl_b = other.face_slice(opposite_face(face))
                    ha = model.gamma_hats[0][sl_a, sl_a]
                    hb = other.gamma_hats[0][sl_b, sl_b]
                    mass = ha @ np.linalg.solve(ha + hb, hb)
                    mass = 0.5 * (mass + mass.T)
                    pairs.append(
                        Interface(
                            low=alpha,
                            low_face=face,
                            high=beta,
                            high_face=opposite_face(face),
                            mass=mass,
                        )
                    )
        return pairs

    # -- parallel helpers ----------------------------------------------

    def _pmap(self, fn, items):
        if self._pool is None:
            return [fn(it) for it in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- physics ---------------------------------------------------------

    def _flux(self, states: dict[Alpha, np.ndarray], alpha: Alpha) -> np.ndarray:
        model = self.models[alpha]
        width = model.width
        u = states[alpha]
        u1 = u[:width]
        u2 = u[width : 2 * width] if model.layers > 1 else np.zeros(width)
        return model.gammas[0] @ (u2 - u1)

    def _acceleration(
        self, states: dict[Alpha, np.ndarray], count_messages: bool = False
    ) -> dict[Alpha, np.ndarray]:
        flux = dict(
            zip(self.order, self._pmap(lambda a: self._flux(states, a), self.order))
        )

        # Exchange: each subdomain posts one m-value message per shared
        # face; the mailbox is keyed by the receiving side.
        mailbox: dict[tuple[Alpha, int], FaceMessage] = {}
        for alpha in self.order:
            model = self.models[alpha]
            for face, beta in sorted(model.neighbors.items()):
                msg = FaceMessage(
                    sender=alpha,
                    face=face,
                    step=self.steps_done,
                    payload=flux[alpha][model.face_slice(face)],
                )
                mailbox[(beta, opposite_face(face))] = msg
                if count_messages:
                    self.message_count += 1

        def face_segment(iface: Interface):
            own = flux[iface.low][self.models[iface.low].face_slice(iface.low_face)]
            msg = mailbox.get((iface.low, iface.low_face))
            if msg is None:
                raise ProtocolError(
                    f"no message arrived at {iface.low} face {iface.low_face} "
                    f"from {iface.high}"
                )
            return iface.mass @ (own + msg.payload)

        segments = self._pmap(face_segment, self.interfaces)

        shared: dict[tuple[Alpha, int], np.ndarray] = {}
        for iface, seg in zip(self.interfaces, segments):
            shared[(iface.low, iface.low_face)] = seg
            shared[(iface.high, iface.high_face)] = seg

        def accel_one(alpha: Alpha) -> np.ndarray:
            model = self.models[alpha]
            width = model.width
            layers = model.layers
            u = states[alpha]
            acc = np.empty_like(u)
            acc[:width] = model.gamma_hats[0] @ flux[alpha]
            for face in model.neighbors:
                seg = shared[(alpha, face)]
                acc[model.face_slice(face)] = seg
            for j in range(1, layers):
                blk = slice(j * width, (j + 1) * width)
                uj = u[blk]
                up = u[(j - 1) * width : j * width]
                un = u[(j + 1) * width : (j + 2) * width] if j + 1 < layers else 0.0
                acc[blk] = model.gamma_hats[j] @ (
                    model.gammas[j] @ (un - uj) - model.gammas[j - 1] @ (uj - up)
                )
            return acc

        return dict(zip(self.order, self._pmap(accel_one, self.order)))

    def _forcing(self, t: float) -> dict[Alpha, np.ndarray]:
        out: dict[Alpha, np.ndarray] = {}
        for src in self.sources:
            term = src.vector * src.profile(t)
            if src.alpha in out:
                out[src.alpha] = out[src.alpha] + term
            else:
                out[src.alpha] = term
        return out

    # -- integration -----------------------------------------------------

    def initialize(
        self,
        u0: dict[Alpha, np.ndarray] | None = None,
        v0: dict[Alpha, np.ndarray] | None = None,
    ):
        """Set the two-level start; second-order accurate in dt."""
        self.u_curr = {
            a: (
                np.array(u0[a], dtype=float)
                if u0 and a in u0
                else np.zeros(self.models[a].state_size)
            )
            for a in self.order
        }
        vel = {
            a: (
                np.asarray(v0[a], dtype=float)
                if v0 and a in v0
                else np.zeros(self.models[a].state_size)
            )
            for a in self.order
        }
        acc = self._acceleration(self.u_curr)
        force = self._forcing(0.0)
        dt = self.dt
        self.u_prev = {}
        for a in self.order:
            total = acc[a] + force.get(a, 0.0)
            self.u_prev[a] = self.u_curr[a] - dt * vel[a] + 0.5 * dt * dt * total
        self.steps_done = 0
        self.time = 0.0
        self.message_count = 0
        self._baseline = sum(
            float(np.linalg.norm(self.u_curr[a])) + dt * float(np.linalg.norm(vel[a]))
            for a in self.order
        )

    def advance(self):
        """One leapfrog step for all subdomains."""
        if not self.u_curr:
            raise ProtocolError("stepper not initialized")
        dt = self.dt
        t = self.time
        acc = self._acceleration(self.u_curr, count_messages=True)
        force = self._forcing(t)
        nxt = {}
        for a in self.order:
            total = acc[a] + force.get(a, 0.0)
            nxt[a] = 2.0 * self.u_curr[a] - self.u_prev[a] + dt * dt * total
        self.u_prev = self.u_curr
        self.u_curr = nxt
        self.steps_done += 1
        self.time = self.steps_done * dt

        for src in self.sources:
            self._baseline += dt * dt * abs(float(src.profile(t))) * float(
                np.linalg.norm(src.vector)
            )
        norm = np.sqrt(sum(float(u @ u) for u in self.u_curr.values()))
        if norm > GROWTH_LIMIT * max(self._baseline, 1e-300):
            raise InstabilityError(
                f"coupled stepping diverged at step {self.steps_done}: |U| = "
                f"{norm:.3e} exceeds {GROWTH_LIMIT:.0e} x reference "
                f"{self._baseline:.3e}"
            )

    def run(
        self,
        n_steps: int,
        probes: Sequence[Probe] = (),
        record_every: int = 1,
        u0: dict[Alpha, np.ndarray] | None = None,
        v0: dict[Alpha, np.ndarray] | None = None,
    ):
        """Step n_steps from rest (or given state), recording probes.

        Returns (times, samples) with one row at t=0 and one after every
        ``record_every`` steps; samples has one column per probe.
        """
        self.initialize(u0, v0)
        times = [0.0]
        rows = [self._probe_row(probes)]
        for step in range(1, n_steps + 1):
            self.advance()
            if step % record_every == 0:
                times.append(self.time)
                rows.append(self._probe_row(probes))
        return np.asarray(times), np.asarray(rows)

    def _probe_row(self, probes: Sequence[Probe]) -> np.ndarray:
        return np.array([p.weights @ self.u_curr[p.alpha] for p in probes])

    # -- diagnostics -------------------------------------------------------

    def energy(self) -> float:
        """Discrete invariant of the coupled leapfrog (staggered form).

        Kinetic part from the state difference, potential part from the
        chain links evaluated across the two stored time levels; exactly
        conserved by the scheme up to rounding.
        """
        if not self.u_curr:
            raise ProtocolError("stepper not initialized")
        dt = self.dt
        total = 0.0
        for a in self.order:
            model = self.models[a]
            width = model.width
            layers = model.layers
            diff = (self.u_curr[a] - self.u_prev[a]) / dt
            for j in range(layers):
                blk = slice(j * width, (j + 1) * width)
                y = np.linalg.solve(model.scales[j], diff[blk])
                total += 0.5 * float(y @ y)
            for j in range(layers):
                blk = slice(j * width, (j + 1) * width)
                nxt = slice((j + 1) * width, (j + 2) * width)
                if j + 1 < layers:
                    da = self.u_curr[a][nxt] - self.u_curr[a][blk]
                    db = self.u_prev[a][nxt] - self.u_prev[a][blk]
                else:
                    da = -self.u_curr[a][blk]
                    db = -self.u_prev[a][blk]
                total += 0.5 * float(da @ (model.gammas[j] @ db))
        return total


def cfl_estimate_coupled(
    models: dict[Alpha, SubdomainModel],
    *,
    tol: float = POWER_TOL,
    max_iter: int = POWER_MAX_ITER,
    seed: int = 0,
) -> tuple[float, bool]:
    """Largest eigenvalue of the coupled second-derivative map.

    Power iteration on the matrix-free acceleration with zero sources;
    returns (lambda_hat, converged).  The stable step is
    2/sqrt(lambda_hat).
    """
    stepper = CoupledStepper(models, dt=1.0, workers=1)
    rng = np.random.default_rng(seed)
    state = {a: rng.standard_normal(models[a].state_size) for a in stepper.order}

    def normalize(vec):
        norm = np.sqrt(sum(float(v @ v) for v in vec.values()))
        return {a: v / norm for a, v in vec.items()}, norm

    state, _ = normalize(state)
    lam = 0.0
    for it in range(max_iter):
        neg = stepper._acceleration(state)
        w = {a: -neg[a] for a in neg}
        lam_new = sum(float(state[a] @ w[a]) for a in w)
        w, norm = normalize(w)
        if norm == 0.0:
            return 0.0, True
        if it > 0 and abs(lam_new - lam) <= tol * abs(lam_new):
            return lam_new, True
        lam = lam_new
        state = w
    log.warning("coupled CFL power iteration hit %d iterations", max_iter)
    return lam, False


def stable_step_coupled(models: dict[Alpha, SubdomainModel], **kw) -> tuple[float, float, bool]:
    """(dt_max, lambda_hat, converged) for the coupled system."""
    lam, converged = cfl_estimate_coupled(models, **kw)
    if lam <= 0:
        raise NumericalError("coupled operator has no negative spectrum")
    return 2.0 / np.sqrt(lam), lam, converged


__all__ = [
    "CFL_SAFETY",
    "CoupledStepper",
    "FaceMessage",
    "Interface",
    "Probe",
    "SourceTerm",
    "chain_operator",
    "cfl_estimate_coupled",
    "make_probe",
    "project_source",
    "stable_step_coupled",
]

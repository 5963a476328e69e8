"""Frequency-domain boundary transfer maps, in four equivalent forms.

For a symmetric negative semidefinite operator A and orthonormal face
inputs F, the boundary transfer map at angular frequency w is

    M(w) = F* (A + w^2 I)^-1 F.

The same map can be evaluated from the Galerkin-projected pair, from
the block tridiagonal form, or from the chain coefficients; the last
three must agree to rounding, and the projected one interpolates the
full map at the expansion point.  These cross-checks are the backbone
of the verification suite.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigError, NumericalError

# Relative residual beyond which a frequency is declared resonant.
RESONANCE_RTOL = 1e-6

# How close (relatively) a frequency may sit to a pole before the
# evaluation grid nudges it away.
POLE_RTOL = 1e-8


def frequency_band(omega_min: float, omega_max: float, count: int = 20) -> np.ndarray:
    """Log-spaced angular frequencies over [omega_min, omega_max]."""
    if not (0 < omega_min < omega_max):
        raise ConfigError(
            f"need 0 < omega_min < omega_max, got [{omega_min}, {omega_max}]"
        )
    if count < 1:
        raise ConfigError(f"need at least one frequency, got {count}")
    return np.geomspace(omega_min, omega_max, count)


def nudge_off_poles(omegas: np.ndarray, poles: np.ndarray) -> np.ndarray:
    """Perturb frequencies that collide with poles of the transfer map.

    ``poles`` are the resonant angular frequencies (square roots of the
    relevant operator's negated eigenvalues).  Any omega within a
    relative POLE_RTOL of a pole is moved up by a small multiple of the
    collision tolerance until clear.
    """
    out = np.array(omegas, dtype=float)
    if poles.size == 0:
        return out
    for i, w in enumerate(out):
        step = 10.0 * POLE_RTOL * max(w, 1.0)
        for _ in range(100):
            if np.min(np.abs(poles - out[i])) > POLE_RTOL * max(out[i], 1.0):
                break
            out[i] += step
    return out


def ntd_full(matrix, f: np.ndarray, omega: float) -> np.ndarray:
    """F* (A + w^2 I)^-1 F by a direct factorization of the full operator."""
    wsq = omega * omega
    n = matrix.shape[0]
    try:
        if sp.issparse(matrix):
            work = (matrix + wsq * sp.identity(n, format="csc")).tocsc()
            x = splu(work).solve(f)
        else:
            x = np.linalg.solve(np.asarray(matrix) + wsq * np.eye(n), f)
    except (RuntimeError, np.linalg.LinAlgError) as exc:
        raise NumericalError(
            f"transfer map solve failed at omega = {omega:.6e}: {exc}"
        ) from exc
    residual = matrix @ x + wsq * x - f
    rel = np.linalg.norm(residual) / max(np.linalg.norm(f), 1e-300)
    if rel > RESONANCE_RTOL:
        raise NumericalError(
            f"omega = {omega:.6e} is resonant (relative residual {rel:.2e}); "
            "move the frequency off the operator spectrum"
        )
    out = f.T @ x
    return 0.5 * (out + out.T)


def ntd_reduced(a_tilde: np.ndarray, f_tilde: np.ndarray, omega: float) -> np.ndarray:
    """Transfer map of the Galerkin-projected pair."""
    wsq = omega * omega
    dim = a_tilde.shape[0]
    try:
        x = np.linalg.solve(a_tilde + wsq * np.eye(dim), f_tilde)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"reduced transfer map is singular at omega = {omega:.6e}"
        ) from exc
    out = f_tilde.T @ x
    return 0.5 * (out + out.T)


def ntd_tridiag(
    diag_blocks: list[np.ndarray],
    off_blocks: list[np.ndarray],
    entry_block: np.ndarray,
    omega: float,
) -> np.ndarray:
    """Transfer map from the block tridiagonal form.

    Backward Schur elimination over the layers; on a numerically
    singular pivot it falls back to one pivoted solve of the assembled
    tridiagonal system.
    """
    wsq = omega * omega
    layers = len(diag_blocks)
    width = entry_block.shape[0]
    eye = np.eye(width)
    schur = diag_blocks[-1] + wsq * eye
    ok = True
    for j in range(layers - 2, -1, -1):
        if np.linalg.cond(schur) > 1e13:
            ok = False
            break
        b = off_blocks[j]
        schur = diag_blocks[j] + wsq * eye - b.T @ np.linalg.solve(schur, b)
    if ok and np.linalg.cond(schur) <= 1e13:
        out = entry_block.T @ np.linalg.solve(schur, entry_block)
        return 0.5 * (out + out.T)

    # assembled fallback with full pivoting
    full = np.zeros((layers * width, layers * width))
    for j in range(layers):
        blk = slice(j * width, (j + 1) * width)
        full[blk, blk] = diag_blocks[j] + wsq * eye
        if j + 1 < layers:
            nxt = slice((j + 1) * width, (j + 2) * width)
            full[nxt, blk] = off_blocks[j]
            full[blk, nxt] = off_blocks[j].T
    rhs = np.zeros((layers * width, width))
    rhs[:width] = entry_block
    try:
        sol = np.linalg.solve(full, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"tridiagonal transfer map is singular at omega = {omega:.6e}"
        ) from exc
    out = entry_block.T @ sol[:width]
    return 0.5 * (out + out.T)


def ntd_chain(
    gammas: np.ndarray,
    gamma_hats: np.ndarray,
    omega: float,
) -> np.ndarray:
    """Transfer map from the chain coefficients.

    Assembles the layer system with a zero closure past the last layer
    and the first inverse-mass block as right-hand side; the transfer
    map is the first block of the solution.
    """
    wsq = omega * omega
    layers = gammas.shape[0]
    width = gammas.shape[1]
    eye = np.eye(width)
    full = np.zeros((layers * width, layers * width))
    for j in range(layers):
        blk = slice(j * width, (j + 1) * width)
        gamma_prev = gammas[j - 1] if j > 0 else np.zeros((width, width))
        full[blk, blk] = wsq * eye - gamma_hats[j] @ (gammas[j] + gamma_prev)
        if j > 0:
            prv = slice((j - 1) * width, j * width)
            full[blk, prv] = gamma_hats[j] @ gamma_prev
        if j + 1 < layers:
            nxt = slice((j + 1) * width, (j + 2) * width)
            full[blk, nxt] = gamma_hats[j] @ gammas[j]
    rhs = np.zeros((layers * width, width))
    rhs[:width] = gamma_hats[0]
    try:
        sol = np.linalg.solve(full, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"chain transfer map is singular at omega = {omega:.6e}"
        ) from exc
    out = sol[:width]
    return 0.5 * (out + out.T)


def band_error(
    matrix,
    f: np.ndarray,
    a_tilde: np.ndarray,
    f_tilde: np.ndarray,
    omegas: np.ndarray,
) -> float:
    """Max relative deviation of the projected map from the full map."""
    worst = 0.0
    for w in omegas:
        exact = ntd_full(matrix, f, w)
        approx = ntd_reduced(a_tilde, f_tilde, w)
        denom = max(np.linalg.norm(exact), 1e-300)
        worst = max(worst, float(np.linalg.norm(approx - exact) / denom))
    return worst

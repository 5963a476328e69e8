"""Offline reduction of subdomain wave operators.

Pipeline, run independently per subdomain:

1. ``build_face_basis`` / ``subdomain_inputs``: orthonormal cosine modes
   on the interior nodes of each face, stacked into the input matrix F.
2. ``build_krylov_basis``: orthonormal basis V of the shifted inverse
   Krylov space spanned by {F, (A-sI)^-1 F, ..., (A-sI)^-n F}.
3. ``project_reduced``: Galerkin pair (V* A V, V* F).
4. ``block_lanczos``: unitary reduction of the projected pair to block
   tridiagonal form (diagonal blocks, subdiagonal blocks, entry block).
5. ``sfraction_transform``: recursive change of variables turning the
   tridiagonal blocks into the positive chain coefficients used by the
   online stepper (link matrices, inverse-mass matrices, layer scales).

``build_subdomain_model`` chains all five steps and packages the result
with the geometry needed online.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import ConfigError, NumericalError
from .grid import SubdomainOperator

log = logging.getLogger(__name__)

# Columns whose pivoted-QR diagonal falls below this fraction of the raw
# block norm are treated as linearly dependent and dropped.
DEFLATION_RTOL = 1e-12

# Chain coefficients with condition numbers beyond this are unusable for
# the online scheme; the transform aborts rather than emit garbage.
CONDITION_LIMIT = 1e12


def _cosine_modes(n: int, k: int) -> np.ndarray:
    """First k orthonormal type-II cosine modes sampled on n cells."""
    i = np.arange(n, dtype=float)
    j = np.arange(k, dtype=float)
    modes = np.cos(np.pi * np.outer(i + 0.5, j) / n)
    scale = np.full(k, math.sqrt(2.0 / n))
    scale[0] = math.sqrt(1.0 / n)
    return modes * scale


def build_face_basis(plane_shape: tuple[int, int], modes: int) -> np.ndarray:
    """Orthonormal tensor cosine modes on one face's owned window.

    Returns a (window nodes, modes) matrix whose rows follow the face
    node ordering (first plane axis slowest).  ``modes`` must be a
    perfect square k*k with k modes along each plane axis, k chosen
    lowest first.
    """
    k = math.isqrt(modes)
    if k * k != modes:
        raise ConfigError(f"modes per face must be a perfect square, got {modes}")
    na, nb = plane_shape
    if k > na or k > nb:
        raise ConfigError(
            f"{modes} modes need {k} per axis but the face window is {na}x{nb}"
        )
    return np.kron(_cosine_modes(na, k), _cosine_modes(nb, k))


def subdomain_inputs(op: SubdomainOperator, modes: int) -> np.ndarray:
    """Stack the six face bases into the (N, 6*modes) input matrix.

    Face f occupies columns [f*modes, (f+1)*modes).  Faces own disjoint
    node sets, so the result is orthonormal by construction.
    """
    n = op.matrix.shape[0]
    f = np.zeros((n, 6 * modes))
    for fid in range(6):
        face = op.face_nodes[fid]
        block = build_face_basis(face.plane_shape, modes)
        f[face.indices, fid * modes : (fid + 1) * modes] = block
    return f


def _shifted_solver(matrix, shift: float):
    """Return x -> (A - shift I)^-1 x, factoring -A + shift I once.

    -A + shift I is positive definite for the wave operators here, so
    the factorization doubles as the singularity check.
    """
    n = matrix.shape[0]
    if sp.issparse(matrix):
        work = (-matrix + shift * sp.identity(n, format="csc")).tocsc()
        try:
            lu = splu(work)
        except RuntimeError as exc:
            hint = shift * 10.0 if shift > 0 else 1e-8
            raise NumericalError(
                f"factorization of the shifted operator failed ({exc}); "
                f"the shift {shift:.3e} is too small, try {hint:.3e}"
            ) from exc
        return lambda x: -lu.solve(x)
    work = -np.asarray(matrix) + shift * np.eye(n)
    try:
        lu, piv = sla.lu_factor(work)
    except (ValueError, sla.LinAlgError) as exc:
        hint = shift * 10.0 if shift > 0 else 1e-8
        raise NumericalError(
            f"factorization of the shifted operator failed ({exc}); "
            f"the shift {shift:.3e} is too small, try {hint:.3e}"
        ) from exc
    return lambda x: -sla.lu_solve((lu, piv), x)


def _orthonormalize_block(basis: np.ndarray, raw: np.ndarray, rtol: float):
    """Two-pass Gram-Schmidt against basis, then rank-revealing QR.

    Returns the orthonormal columns that survive deflation (possibly
    zero columns).
    """
    x = raw.copy()
    for _ in range(2):
        x -= basis @ (basis.T @ x)
    tol = rtol * max(float(np.linalg.norm(raw)), 1e-300)
    q, r, _ = sla.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > tol))
    if rank == 0:
        return x[:, :0]
    signs = np.sign(np.diag(r)[:rank])
    signs[signs == 0] = 1.0
    return q[:, :rank] * signs


def build_krylov_basis(
    matrix,
    f: np.ndarray,
    n: int,
    shift: float,
    deflation_rtol: float = DEFLATION_RTOL,
) -> tuple[np.ndarray, list[int]]:
    """Orthonormal basis of span{F, (A-sI)^-1 F, ..., (A-sI)^-n F}.

    F itself must be orthonormal; it is kept verbatim as the leading
    block so the projected input stays an identity block.  Returns the
    basis and the per-block column counts after deflation.
    """
    gram = f.T @ f
    if np.linalg.norm(gram - np.eye(f.shape[1])) > 1e-10:
        raise NumericalError("input block must be orthonormal")
    solve = _shifted_solver(matrix, shift)
    basis = f.copy()
    sizes = [f.shape[1]]
    prev = f
    for _ in range(n):
        kept = _orthonormalize_block(basis, solve(prev), deflation_rtol)
        if kept.shape[1] == 0:
            sizes.append(0)
            break
        basis = np.hstack([basis, kept])
        sizes.append(kept.shape[1])
        prev = kept
    if sum(sizes) < f.shape[1] * (n + 1):
        log.info(
            "krylov basis deflated: block sizes %s (full would be %d x %d)",
            sizes,
            n + 1,
            f.shape[1],
        )
    return basis, sizes


def project_reduced(basis: np.ndarray, matrix, f: np.ndarray):
    """Galerkin projection (V* A V, V* F) with the symmetry restored."""
    av = matrix @ basis
    a_tilde = basis.T @ av
    a_tilde = 0.5 * (a_tilde + a_tilde.T)
    return a_tilde, basis.T @ f


@dataclass
class LanczosChain:
    """Block tridiagonal form of a projected pair.

    diag_blocks[j] and off_blocks[j-1] hold the layer-j diagonal block
    and the subdiagonal block connecting layers j and j+1; entry_block
    is the QR factor of the projected input (upper triangular, positive
    diagonal).  q has one column group per layer.
    """

    diag_blocks: list[np.ndarray]
    off_blocks: list[np.ndarray]
    entry_block: np.ndarray
    q: np.ndarray
    block_sizes: list[int] = field(default_factory=list)


def block_lanczos(a_tilde: np.ndarray, f_tilde: np.ndarray) -> LanczosChain:
    """Block Lanczos reduction of (A~, F~) to block tridiagonal form.

    Runs with full two-pass reorthogonalization until the space is
    exhausted or a rank-deficient block appears; block sizes are
    recorded so callers can truncate to complete layers.
    """
    dim, width = f_tilde.shape
    tol = 1e-11 * max(float(np.linalg.norm(a_tilde)) / math.sqrt(dim), 1e-300)

    q1, b1 = np.linalg.qr(f_tilde)
    signs = np.sign(np.diag(b1))
    signs[signs == 0] = 1.0
    q1 = q1 * signs
    b1 = b1 * signs[:, None]

    blocks = [q1]
    basis = q1
    diag_blocks: list[np.ndarray] = []
    off_blocks: list[np.ndarray] = []
    sizes = [width]
    while True:
        qj = blocks[-1]
        z = a_tilde @ qj
        if len(blocks) > 1:
            z -= blocks[-2] @ off_blocks[-1].T
        aj = qj.T @ z
        aj = 0.5 * (aj + aj.T)
        diag_blocks.append(aj)
        z -= qj @ aj
        for _ in range(2):
            z -= basis @ (basis.T @ z)
        if basis.shape[1] + z.shape[1] > dim:
            # not enough space left for a full layer; stop cleanly
            room = dim - basis.shape[1]
            if room <= 0:
                break
        qn, rn = np.linalg.qr(z)
        dn = np.abs(np.diag(rn))
        rank = int(np.sum(dn > tol))
        if rank < z.shape[1]:
            if rank > 0:
                sizes.append(rank)
            break
        signs = np.sign(np.diag(rn))
        signs[signs == 0] = 1.0
        qn = qn * signs
        rn = rn * signs[:, None]
        off_blocks.append(rn)
        blocks.append(qn)
        basis = np.hstack([basis, qn])
        sizes.append(z.shape[1])

    layers = len(diag_blocks)
    return LanczosChain(
        diag_blocks=diag_blocks,
        off_blocks=off_blocks[: layers - 1],
        entry_block=b1,
        q=np.hstack(blocks[:layers]),
        block_sizes=sizes[:layers],
    )


def _spd_inverse_congruence(g: np.ndarray, a: np.ndarray) -> np.ndarray:
    """G^-T A G^-1 for square G, via two triangular-free solves."""
    y = np.linalg.solve(g.T, a)
    z = np.linalg.solve(g.T, y.T).T
    return 0.5 * (z + z.T)


def sfraction_transform(
    diag_blocks: list[np.ndarray],
    off_blocks: list[np.ndarray],
    entry_block: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray], list[np.ndarray]]:
    """Chain coefficients (links, inverse masses, layer scales).

    The recursion walks the tridiagonal blocks once:

        G_1     = B_1*
        Ghat_j  = G_j G_j*
        Gam_j   = -G_j^-* A_j G_j^-1 - Gam_{j-1}        (Gam_0 = 0)
        G_{j+1} = (G_j* Gam_j)^-1 B_{j+1}*

    and aborts when a scale or link matrix becomes numerically
    singular, which signals an unusable basis/deflation interaction.
    """
    layers = len(diag_blocks)
    width = entry_block.shape[0]
    gammas: list[np.ndarray] = []
    gamma_hats: list[np.ndarray] = []
    scales: list[np.ndarray] = []
    g = entry_block.T.copy()
    gamma_prev = np.zeros((width, width))
    for j in range(layers):
        if np.linalg.cond(g) > CONDITION_LIMIT:
            raise NumericalError(
                f"chain scale matrix at layer {j + 1} is numerically singular "
                f"(condition > {CONDITION_LIMIT:.0e}); the reduction basis is "
                "unusable at this size, reduce the layer count"
            )
        scales.append(g)
        gamma_hats.append(g @ g.T)
        gamma = -_spd_inverse_congruence(g, diag_blocks[j]) - gamma_prev
        gammas.append(gamma)
        if j + 1 < layers:
            if np.linalg.cond(gamma) > CONDITION_LIMIT:
                raise NumericalError(
                    f"chain link matrix at layer {j + 1} is numerically "
                    f"singular (condition > {CONDITION_LIMIT:.0e}); reduce "
                    "the layer count"
                )
            g = np.linalg.solve(g.T @ gamma, off_blocks[j].T)
        gamma_prev = gamma
    return gammas, gamma_hats, scales


@dataclass
class SubdomainModel:
    """Everything the online stage needs for one subdomain.

    The chain stacks have shape (layers, 6m, 6m); ``basis`` is the
    node-space image of the reduction basis (V Q), used only to project
    sources/initial data and to reconstruct receiver traces.
    """

    alpha: tuple[int, int, int]
    lo: tuple[int, int, int]
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    modes_per_face: int
    layers: int
    shift: float
    neighbors: dict[int, tuple[int, int, int]]
    face_indices: tuple[np.ndarray, ...]
    gammas: np.ndarray
    gamma_hats: np.ndarray
    scales: np.ndarray
    basis: np.ndarray | None
    c: np.ndarray
    mu: np.ndarray
    deflated: bool = False
    truncated: bool = False

    @property
    def width(self) -> int:
        return 6 * self.modes_per_face

    def face_slice(self, face: int) -> slice:
        m = self.modes_per_face
        return slice(face * m, (face + 1) * m)

    @property
    def state_size(self) -> int:
        return self.layers * self.width


def build_subdomain_model(
    op: SubdomainOperator,
    modes_per_face: int,
    n: int,
    shift: float,
) -> SubdomainModel:
    """Run the full offline pipeline for one subdomain operator."""
    width = 6 * modes_per_face
    f = subdomain_inputs(op, modes_per_face)
    basis, sizes = build_krylov_basis(op.matrix, f, n, shift)

    # Deflation in block k means the space of k+1 blocks is already
    # partially dependent.  Dropping the deflated tail keeps exactly the
    # space a lower-order build would produce, which preserves the
    # rational approximation property; truncating the Lanczos chain of
    # the larger space instead would degrade it to a polynomial one.
    keep = 0
    for size in sizes:
        if size != width:
            break
        keep += 1
    deflated = keep < len(sizes)
    if keep < 2:
        raise NumericalError(
            f"subdomain {op.alpha}: shifted-inverse images of the face inputs "
            f"are dependent already at depth 1 (block sizes {sizes}); reduce "
            "the number of face modes"
        )
    truncated = keep < n + 1
    if truncated:
        log.info(
            "subdomain %s: basis truncated to %d complete blocks (sizes %s)",
            op.alpha,
            keep,
            sizes,
        )
        basis = basis[:, : keep * width]

    a_tilde, f_tilde = project_reduced(basis, op.matrix, f)
    chain = block_lanczos(a_tilde, f_tilde)
    if chain.block_sizes != [width] * keep:
        raise NumericalError(
            f"subdomain {op.alpha}: tridiagonalization lost rank (layer sizes "
            f"{chain.block_sizes}); try a different expansion shift"
        )

    diag = chain.diag_blocks
    off = chain.off_blocks
    q = chain.q
    gammas, hats, scales = sfraction_transform(diag, off, chain.entry_block)

    if np.linalg.norm(hats[0] - np.eye(width)) > 1e-8:
        raise NumericalError(
            f"subdomain {op.alpha}: first inverse-mass block deviates from "
            "identity; the input block was not kept verbatim in the basis"
        )

    return SubdomainModel(
        alpha=op.alpha,
        lo=op.lo,
        shape=op.shape,
        spacing=op.spacing,
        modes_per_face=modes_per_face,
        layers=keep,
        shift=shift,
        neighbors=dict(op.neighbors),
        face_indices=tuple(op.face_nodes[f].indices for f in range(6)),
        gammas=np.stack(gammas),
        gamma_hats=np.stack(hats),
        scales=np.stack(scales),
        basis=basis @ q,
        c=op.c,
        mu=op.mu,
        deflated=deflated,
        truncated=truncated,
    )


def project_state(model: SubdomainModel, w: np.ndarray) -> np.ndarray:
    """Map a node-space field (symmetrized variable) to chain layers."""
    if model.basis is None:
        raise NumericalError("model was loaded without its node-space basis")
    coeff = model.basis.T @ w
    out = np.empty_like(coeff)
    m6 = model.width
    for j in range(model.layers):
        blk = slice(j * m6, (j + 1) * m6)
        out[blk] = model.scales[j] @ coeff[blk]
    return out


def state_to_nodes(model: SubdomainModel, u: np.ndarray) -> np.ndarray:
    """Inverse of project_state on the reduction subspace."""
    if model.basis is None:
        raise NumericalError("model was loaded without its node-space basis")
    m6 = model.width
    coeff = np.empty_like(u)
    for j in range(model.layers):
        blk = slice(j * m6, (j + 1) * m6)
        coeff[blk] = np.linalg.solve(model.scales[j], u[blk])
    return model.basis @ coeff

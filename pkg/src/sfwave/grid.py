"""Cartesian fine grid, subdomain partition, and spatial operators.

The global domain is a box covered by a vertex-centered uniform grid.
Subdomains tile the box and share a single node layer with each
neighbor, so an axis split into ``count`` subdomains of ``p`` nodes
each carries ``count * (p - 1) + 1`` distinct node layers.

Shared nodes are weighted by ownership: a subdomain owns the fraction
``1 / (number of subdomains containing the node)`` of the node's
finite-volume cell, and stiffness links lying inside a shared layer
are split the same way.  The weighted per-subdomain pieces add up to
the undivided global operator exactly; that identity is what makes
flux coupling across subdomain faces consistent with the global
dynamics.

Operators act on the symmetrized variable ``w = u / c``.  The
semi-discrete acoustic equation ``u_tt = c^2 Lap_h(u)`` becomes
``w_tt = A w`` with ``A = C Lap_h C`` (``C = diag(c)``), a symmetric
negative semidefinite matrix.  A subdomain with mass weights ``M``
stores ``A = M^{-1/2} C Lap_h C M^{-1/2}`` acting on ``sqrt(M) w``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ConfigError

log = logging.getLogger(__name__)

# Face ids: 0/1 = low/high x, 2/3 = low/high y, 4/5 = low/high z.
FACE_AXIS = (0, 0, 1, 1, 2, 2)
FACE_SIDE = (0, 1, 0, 1, 0, 1)
FACE_NAMES = ("-x", "+x", "-y", "+y", "-z", "+z")


def opposite_face(face: int) -> int:
    return face ^ 1


@dataclass(frozen=True)
class DomainSpec:
    """Geometry of the global box and its subdomain tiling.

    Parameters
    ----------
    extents : physical box size per axis.
    subdomain_counts : number of subdomains per axis.
    nodes_per_subdomain : fine-grid nodes per subdomain per axis
        (adjacent subdomains share one node layer).
    outer_bc : ``"reflecting"`` or ``"sponge"``.  Both use the natural
        (mirror) closure in the operator; the sponge damps the field
        during time stepping instead of altering the matrix.
    """

    extents: tuple[float, float, float]
    subdomain_counts: tuple[int, int, int]
    nodes_per_subdomain: tuple[int, int, int]
    outer_bc: str = "reflecting"

    def __post_init__(self):
        if len(self.extents) != 3 or any(e <= 0 for e in self.extents):
            raise ConfigError("extents must be three positive numbers", "domain.extents")
        if len(self.subdomain_counts) != 3 or any(c < 1 for c in self.subdomain_counts):
            raise ConfigError("subdomain counts must be >= 1", "domain.subdomains")
        if len(self.nodes_per_subdomain) != 3 or any(p < 4 for p in self.nodes_per_subdomain):
            # p >= 4 keeps every face with a nonempty strict interior.
            raise ConfigError("nodes per subdomain must be >= 4", "domain.nodes_per_subdomain")
        if self.outer_bc not in ("reflecting", "sponge"):
            raise ConfigError("outer_bc must be 'reflecting' or 'sponge'", "domain.outer_bc")

    @property
    def global_shape(self) -> tuple[int, int, int]:
        return tuple(
            c * (p - 1) + 1
            for c, p in zip(self.subdomain_counts, self.nodes_per_subdomain)
        )

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(e / (n - 1) for e, n in zip(self.extents, self.global_shape))


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, inclusive on both ends."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        if any(l > h for l, h in zip(self.lo, self.hi)):
            raise ConfigError(f"box has lo > hi: {self.lo} vs {self.hi}")

    def contains(self, point) -> bool:
        return all(l <= x <= h for l, x, h in zip(self.lo, point, self.hi))


@dataclass(frozen=True)
class MediumModel:
    """Piecewise-constant sound speed: background plus override boxes.

    Later regions override earlier ones where they overlap.
    """

    background_c: float
    regions: tuple[tuple[Box, float], ...] = ()

    def __post_init__(self):
        if self.background_c <= 0:
            raise ConfigError("background sound speed must be positive", "medium.background_c")
        for i, (_, c) in enumerate(self.regions):
            if c <= 0:
                raise ConfigError("sound speed must be positive", f"medium.regions[{i}].c")


@dataclass(frozen=True)
class SubdomainInfo:
    """Placement of one subdomain inside the global grid."""

    alpha: tuple[int, int, int]
    lo: tuple[int, int, int]            # global index of the low corner
    shape: tuple[int, int, int]         # nodes per axis
    neighbors: dict[int, tuple[int, int, int]] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, l + s) for l, s in zip(self.lo, self.shape))


@dataclass(frozen=True)
class DomainPartition:
    """The tiling of the global grid into shared-layer subdomains."""

    spec: DomainSpec
    subdomains: tuple[SubdomainInfo, ...]

    @property
    def global_shape(self) -> tuple[int, int, int]:
        return self.spec.global_shape

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.spec.spacing

    def subdomain(self, alpha: tuple[int, int, int]) -> SubdomainInfo:
        cx, cy, cz = self.spec.subdomain_counts
        i, j, k = alpha
        if not (0 <= i < cx and 0 <= j < cy and 0 <= k < cz):
            raise KeyError(f"no subdomain {alpha}")
        return self.subdomains[(i * cy + j) * cz + k]

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.global_shape[axis]
        return np.arange(n) * self.spacing[axis]

    def node_coords(self, ijk) -> tuple[float, float, float]:
        return tuple(i * h for i, h in zip(ijk, self.spacing))

    def nearest_node(self, point) -> tuple[int, int, int]:
        out = []
        for x, h, n, e in zip(point, self.spacing, self.global_shape, self.spec.extents):
            if not (-0.5 * h <= x <= e + 0.5 * h):
                raise ConfigError(f"point {point} lies outside the domain")
            out.append(int(np.clip(round(x / h), 0, n - 1)))
        return tuple(out)

    def subdomains_containing(self, ijk) -> list[tuple[int, int, int]]:
        """All subdomain indices whose node set contains the global node."""
        per_axis = []
        for x, c, p in zip(ijk, self.spec.subdomain_counts, self.spec.nodes_per_subdomain):
            step = p - 1
            hits = [a for a in range(c) if a * step <= x <= a * step + step]
            per_axis.append(hits)
        return [
            (i, j, k)
            for i in per_axis[0]
            for j in per_axis[1]
            for k in per_axis[2]
        ]

    def owner_of(self, ijk) -> tuple[int, int, int]:
        """Lexicographically smallest subdomain containing the node."""
        return min(self.subdomains_containing(ijk))

    def interfaces(self) -> list[tuple[tuple[int, int, int], tuple[int, int, int]]]:
        """Sorted list of coupled subdomain pairs (lower alpha first)."""
        pairs = set()
        for sub in self.subdomains:
            for beta in sub.neighbors.values():
                pairs.add(tuple(sorted((sub.alpha, beta))))
        return sorted(pairs)


def build_partition(spec: DomainSpec) -> DomainPartition:
    """Tile the global grid into subdomains with shared boundary layers."""
    cx, cy, cz = spec.subdomain_counts
    px, py, pz = spec.nodes_per_subdomain
    subs = []
    for i in range(cx):
        for j in range(cy):
            for k in range(cz):
                alpha = (i, j, k)
                neighbors = {}
                for f in range(6):
                    ax, side = FACE_AXIS[f], FACE_SIDE[f]
                    beta = list(alpha)
                    beta[ax] += 1 if side else -1
                    if 0 <= beta[ax] < spec.subdomain_counts[ax]:
                        neighbors[f] = tuple(beta)
                subs.append(
                    SubdomainInfo(
                        alpha=alpha,
                        lo=(i * (px - 1), j * (py - 1), k * (pz - 1)),
                        shape=(px, py, pz),
                        neighbors=neighbors,
                    )
                )
    return DomainPartition(spec=spec, subdomains=tuple(subs))


def sample_medium(medium: MediumModel, partition: DomainPartition) -> np.ndarray:
    """Sample the sound speed on the global grid (shape = global_shape).

    Region boxes are clipped to the domain; later regions override
    earlier ones.
    """
    shape = partition.global_shape
    c = np.full(shape, float(medium.background_c))
    coords = [partition.axis_coords(a) for a in range(3)]
    for idx, (box, value) in enumerate(medium.regions):
        masks = []
        clipped = False
        for a in range(3):
            lo, hi = box.lo[a], box.hi[a]
            if lo < 0 or hi > partition.spec.extents[a]:
                clipped = True
            masks.append((coords[a] >= lo) & (coords[a] <= hi))
        if clipped:
            log.info("medium region %d clipped to the domain box", idx)
        sel = np.ix_(masks[0], masks[1], masks[2])
        if any(m.sum() == 0 for m in masks):
            log.warning("medium region %d contains no grid nodes", idx)
            continue
        c[sel] = value
    return c


@dataclass(frozen=True)
class FaceNodes:
    """Rectangular window of boundary nodes owned by one subdomain face.

    The six windows tile the whole boundary surface: every boundary
    node is owned by exactly one face.  A node lying on several face
    planes goes to an interface face over an exterior one, then to the
    face with the smallest normal axis.  Ownership of an edge depends
    only on neighbour existence along the transverse axes, which the
    two subdomains sharing a face agree on, so interface windows pair
    up identically on both sides.

    ``indices`` are flat local node indices ordered lexicographically
    by the two in-plane global axes, so the two subdomains sharing a
    face enumerate the same physical nodes in the same order.
    """

    face: int
    indices: np.ndarray
    plane_shape: tuple[int, int]


@dataclass(frozen=True)
class SubdomainOperator:
    """Weighted wave operator of one subdomain plus its bookkeeping.

    ``matrix`` is symmetric negative semidefinite and acts on the
    mass-scaled symmetrized field ``sqrt(mu) * u / c``.  ``mu`` holds
    the per-node ownership fraction (1 inside, 1/2 on faces, 1/4 on
    shared edges, 1/8 on shared corners).
    """

    alpha: tuple[int, int, int]
    lo: tuple[int, int, int]
    shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    matrix: sparse.csr_array
    c: np.ndarray                    # local sound speed, flattened
    mu: np.ndarray                   # local ownership fraction, flattened
    neighbors: dict[int, tuple[int, int, int]]
    face_nodes: dict[int, FaceNodes]

    @property
    def n_nodes(self) -> int:
        return self.matrix.shape[0]

    def local_index(self, ijk_global) -> int:
        loc = tuple(g - l for g, l in zip(ijk_global, self.lo))
        if any(x < 0 or x >= s for x, s in zip(loc, self.shape)):
            raise KeyError(f"node {ijk_global} not in subdomain {self.alpha}")
        return int(np.ravel_multi_index(loc, self.shape))

    def global_indices(self, global_shape) -> np.ndarray:
        """Flat global index of each local node (local C-order)."""
        grids = np.meshgrid(
            *[np.arange(l, l + s) for l, s in zip(self.lo, self.shape)],
            indexing="ij",
        )
        return np.ravel_multi_index(tuple(grids), global_shape).ravel()


def _axis_multiplicity(n: int, shared_low: bool, shared_high: bool) -> np.ndarray:
    m = np.ones(n)
    if shared_low:
        m[0] = 2.0
    if shared_high:
        m[-1] = 2.0
    return m


def _graph_stiffness(
    shape: tuple[int, int, int],
    spacing: tuple[float, float, float],
    c: np.ndarray,
    axis_mult: list[np.ndarray],
) -> sparse.csr_array:
    """Assemble -sum_e w_e (c_i e_i - c_j e_j)(...)^T / h^2 over grid links.

    ``axis_mult[a]`` gives the per-layer sharing multiplicity along axis
    ``a``; a link is down-weighted by the product of the transverse
    multiplicities at its location (links inside a shared layer are
    split between the subdomains that contain them).
    """
    n = int(np.prod(shape))
    cv = np.asarray(c, dtype=float).reshape(shape)
    idx = np.arange(n).reshape(shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for d in range(3):
        if shape[d] < 2:
            continue
        lo_sl = [slice(None)] * 3
        hi_sl = [slice(None)] * 3
        lo_sl[d] = slice(0, shape[d] - 1)
        hi_sl[d] = slice(1, shape[d])
        i = idx[tuple(lo_sl)].ravel()
        j = idx[tuple(hi_sl)].ravel()
        ci = cv[tuple(lo_sl)].ravel()
        cj = cv[tuple(hi_sl)].ravel()
        # transverse multiplicity product on the link grid
        w = np.ones(1)
        for a in range(3):
            if a == d:
                continue
            sh = [1, 1, 1]
            sh[a] = shape[a]
            w = w * axis_mult[a].reshape(sh)
        link_shape = list(shape)
        link_shape[d] -= 1
        w = np.broadcast_to(w, link_shape).ravel()
        scale = 1.0 / (w * spacing[d] ** 2)
        rows.append(i)
        cols.append(j)
        vals.append(ci * cj * scale)
        rows.append(j)
        cols.append(i)
        vals.append(ci * cj * scale)
        np.add.at(diag, i, -ci * ci * scale)
        np.add.at(diag, j, -cj * cj * scale)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    mat = sparse.coo_array(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    )
    return mat.tocsr()


def _face_nodes(
    shape: tuple[int, int, int], face: int, neighbor_faces
) -> FaceNodes:
    ax = FACE_AXIS[face]
    layer = shape[ax] - 1 if FACE_SIDE[face] else 0
    mine = face in neighbor_faces
    ranges = []
    dims = []
    for a in range(3):
        if a == ax:
            ranges.append(np.array([layer]))
            continue
        lo, hi = 0, shape[a]
        for side in (0, 1):
            crossing = (2 * a + side) in neighbor_faces
            # An edge on two face planes goes to the interface plane if
            # only one is an interface, else to the smaller normal axis.
            trim = crossing if crossing != mine else a < ax
            if trim:
                if side == 0:
                    lo = 1
                else:
                    hi = shape[a] - 1
        ranges.append(np.arange(lo, hi))
        dims.append(hi - lo)
    grids = np.meshgrid(*ranges, indexing="ij")
    flat = np.ravel_multi_index(tuple(g.ravel() for g in grids), shape)
    return FaceNodes(face=face, indices=flat.astype(np.int64), plane_shape=tuple(dims))


def assemble_subdomain_operator(
    partition: DomainPartition,
    alpha: tuple[int, int, int],
    c_field: np.ndarray,
) -> SubdomainOperator:
    """Build the weighted symmetric operator of one subdomain.

    Parameters
    ----------
    c_field : global sound-speed array from :func:`sample_medium`.

    Returns
    -------
    SubdomainOperator with ``matrix = D K D`` where ``K`` is the
    link-weighted stiffness and ``D = diag(1/sqrt(mu))``.
    """
    sub = partition.subdomain(alpha)
    shape = sub.shape
    c_loc = np.ascontiguousarray(c_field[sub.slices()], dtype=float)
    axis_mult = [
        _axis_multiplicity(shape[a], (2 * a) in sub.neighbors, (2 * a + 1) in sub.neighbors)
        for a in range(3)
    ]
    k = _graph_stiffness(shape, partition.spacing, c_loc, axis_mult)
    mult = (
        axis_mult[0][:, None, None]
        * axis_mult[1][None, :, None]
        * axis_mult[2][None, None, :]
    ).ravel()
    d = sparse.diags_array(np.sqrt(mult))
    mat = (d @ k @ d).tocsr()
    mat.sum_duplicates()
    faces = {f: _face_nodes(shape, f, sub.neighbors) for f in range(6)}
    return SubdomainOperator(
        alpha=alpha,
        lo=sub.lo,
        shape=shape,
        spacing=partition.spacing,
        matrix=mat,
        c=c_loc.ravel(),
        mu=1.0 / mult,
        neighbors=dict(sub.neighbors),
        face_nodes=faces,
    )


def assemble_global_operator(
    partition: DomainPartition, c_field: np.ndarray
) -> sparse.csr_array:
    """Undivided operator ``C Lap_h C`` on the full grid (mirror closure)."""
    shape = partition.global_shape
    ones = [np.ones(shape[a]) for a in range(3)]
    return _graph_stiffness(shape, partition.spacing, np.asarray(c_field, float), ones)

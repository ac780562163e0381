"""Triangular meshes of the disk with electrode-aligned boundaries.

Meshes are built sector by sector: the disk is cut into ``L`` congruent
sectors (one electrode plus one gap each), a structured layered
triangulation is generated for a single sector in sector-local angular
coordinates and the same connectivity is replicated for every sector.  The
resulting mesh is exactly invariant under rotation by ``2*pi/L``, which the
forward-model symmetry checks rely on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import DimensionError, GeometryError


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable P1 triangulation of a disk.

    Attributes
    ----------
    nodes : (N, 2) float array
    elements : (M, 3) int array, counter-clockwise
    boundary_edges : (E, 2) int array, counter-clockwise along the boundary
    electrode_edges : list of int arrays, boundary-edge indices per electrode
    radius, coverage : geometry metadata
    """

    nodes: np.ndarray
    elements: np.ndarray
    boundary_edges: np.ndarray
    electrode_edges: list
    radius: float = 1.0
    coverage: float = 0.5
    tag: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.ascontiguousarray(self.nodes, dtype=float))
        object.__setattr__(self, "elements", np.ascontiguousarray(self.elements, dtype=np.int64))
        object.__setattr__(
            self, "boundary_edges", np.ascontiguousarray(self.boundary_edges, dtype=np.int64)
        )
        object.__setattr__(
            self, "electrode_edges", [np.asarray(e, dtype=np.int64) for e in self.electrode_edges]
        )
        for arr in (self.nodes, self.elements, self.boundary_edges):
            arr.setflags(write=False)
        if np.any(self.signed_areas <= 0):
            raise GeometryError("mesh contains degenerate or inverted elements")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_electrodes(self) -> int:
        return len(self.electrode_edges)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def element_areas(self) -> np.ndarray:
        return self.signed_areas

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.elements].mean(axis=1)

    @cached_property
    def basis_gradients(self) -> np.ndarray:
        """Constant gradients of the three hat functions, shape (M, 3, 2)."""
        p = self.nodes[self.elements]
        two_a = 2.0 * self.signed_areas
        g = np.empty((self.n_elements, 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = (p[:, j, 1] - p[:, k, 1]) / two_a
            g[:, i, 1] = (p[:, k, 0] - p[:, j, 0]) / two_a
        return g

    @cached_property
    def local_stiffness(self) -> np.ndarray:
        """Unit-coefficient element stiffness matrices, shape (M, 3, 3)."""
        g = self.basis_gradients
        return self.signed_areas[:, None, None] * np.einsum("eid,ejd->eij", g, g)

    @cached_property
    def boundary_edge_lengths(self) -> np.ndarray:
        p = self.nodes[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def electrode_lengths(self) -> np.ndarray:
        """Polygonal length of each electrode (sum of its chord edges)."""
        return np.array([self.boundary_edge_lengths[e].sum() for e in self.electrode_edges])

    def electrode_arc_lengths(self) -> np.ndarray:
        """Arc length along the circle between the end points of each electrode."""
        out = []
        for e in self.electrode_edges:
            a = self.nodes[self.boundary_edges[e, 0]]
            b = self.nodes[self.boundary_edges[e, 1]]
            ang = np.arctan2(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], np.sum(a * b, axis=1))
            out.append(self.radius * ang.sum())
        return np.array(out)

    @cached_property
    def node_to_element_average(self) -> sparse.csr_matrix:
        """(M, N) operator mapping node values to element means."""
        m = self.n_elements
        rows = np.repeat(np.arange(m), 3)
        return sparse.csr_matrix(
            (np.full(3 * m, 1.0 / 3.0), (rows, self.elements.ravel())), shape=(m, self.n_nodes)
        )

    @cached_property
    def stiffness_matrix(self) -> sparse.csr_matrix:
        return self._assemble(self.local_stiffness)

    @cached_property
    def mass_matrix(self) -> sparse.csr_matrix:
        local = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
        return self._assemble(self.signed_areas[:, None, None] * local)

    def _assemble(self, local: np.ndarray) -> sparse.csr_matrix:
        rows = np.repeat(self.elements, 3, axis=1).ravel()
        cols = np.tile(self.elements, (1, 3)).ravel()
        n = self.n_nodes
        return sparse.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))

    @cached_property
    def interior_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Pairs of elements sharing an edge and the shared edge lengths."""
        e = self.elements
        edges = np.concatenate([e[:, [0, 1]], e[:, [1, 2]], e[:, [2, 0]]])
        owner = np.tile(np.arange(self.n_elements), 3)
        key = np.sort(edges, axis=1)
        order = np.lexsort((key[:, 1], key[:, 0]))
        key, owner, edges = key[order], owner[order], edges[order]
        same = np.all(key[1:] == key[:-1], axis=1)
        idx = np.flatnonzero(same)
        pairs = np.stack([owner[idx], owner[idx + 1]], axis=1)
        p = self.nodes[key[idx]]
        lengths = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        return pairs, lengths

    def median_edge_length(self) -> float:
        e = self.elements
        p = self.nodes
        lens = np.concatenate(
            [np.linalg.norm(p[e[:, i]] - p[e[:, (i + 1) % 3]], axis=1) for i in range(3)]
        )
        return float(np.median(lens))

    def rotate(self, angle: float) -> "Mesh":
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        return Mesh(
            self.nodes @ rot.T,
            self.elements,
            self.boundary_edges,
            self.electrode_edges,
            self.radius,
            self.coverage,
            self.tag,
            dict(self.meta),
        )

    # serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "boundary_edges": self.boundary_edges.tolist(),
            "electrode_edges": [e.tolist() for e in self.electrode_edges],
            "radius": self.radius,
            "coverage": self.coverage,
            "tag": self.tag,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mesh":
        return cls(
            np.asarray(d["nodes"], dtype=float),
            np.asarray(d["elements"], dtype=np.int64),
            np.asarray(d["boundary_edges"], dtype=np.int64),
            [np.asarray(e, dtype=np.int64) for e in d["electrode_edges"]],
            float(d["radius"]),
            float(d["coverage"]),
            d.get("tag", ""),
            d.get("meta", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mesh":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# generation


def _ring_counts(n_b: int, n_layers: int) -> list[int]:
    # nodes per sector on rings 1..n_layers; ring n_layers is the boundary
    counts = [max(1, round(n_b * j / n_layers)) for j in range(1, n_layers)]
    return counts + [n_b]


def _element_count(n_b: int, n_layers: int, n_sectors: int) -> int:
    m = _ring_counts(n_b, n_layers)
    per_sector = m[0] + sum(m[j] + m[j + 1] for j in range(len(m) - 1))
    return n_sectors * per_sector


def _strip(inner: list[float], outer: list[float]) -> list[tuple[str, int, int]]:
    """Advancing-front triangulation between two rings of one sector.

    ``inner``/``outer`` hold sector-local fractions in [0, 1) starting at 0.
    Index ``len(ring)`` refers to node 0 of the next sector.  Returns
    triangles as (kind, i, j) tuples decoded by the caller.
    """
    ni, no = len(inner), len(outer)
    fi = list(inner) + [1.0]
    fo = list(outer) + [1.0]
    i = j = 0
    tris = []
    while i < ni or j < no:
        if i < ni and (j == no or fi[i + 1] < fo[j + 1]):
            tris.append(("in", i, j))
            i += 1
        else:
            tris.append(("out", i, j))
            j += 1
    return tris


def build_disk_mesh(
    radius: float = 1.0,
    n_electrodes: int = 16,
    coverage: float = 0.45,
    target_elements: int = 5248,
    edges_per_electrode: int = 4,
    smoothing_sweeps: int = 3,
) -> Mesh:
    """Build a rotationally symmetric disk mesh with electrode-aligned nodes.

    Electrode ``l`` is centred at angle ``2*pi*l/L`` and covers the fraction
    ``coverage`` of its sector; both electrode end points are mesh nodes.
    The layer count is the one whose exact element count is closest to
    ``target_elements``.
    """
    if n_electrodes < 2:
        raise GeometryError("need at least two electrodes")
    if not 0.0 < coverage < 1.0:
        raise GeometryError(f"coverage must lie in (0, 1), got {coverage}")
    if target_elements < 64:
        raise GeometryError("target_elements must be at least 64")
    if edges_per_electrode < 1:
        raise GeometryError("edges_per_electrode must be positive")

    if (1.0 - coverage) * 2.0 * math.pi / n_electrodes < 1e-6 * radius:
        raise GeometryError("electrode gaps vanish for this coverage")

    # coarse targets cannot resolve the requested boundary subdivision;
    # fall back to fewer edges per electrode until the count fits
    for n_e in range(edges_per_electrode, 0, -1):
        n_g = max(1, round((1.0 - coverage) / coverage * n_e))
        n_b = n_e + n_g
        n_layers = min(
            range(2, 2000),
            key=lambda J: (abs(_element_count(n_b, J, n_electrodes) - target_elements), J),
        )
        count = _element_count(n_b, n_layers, n_electrodes)
        if abs(count - target_elements) <= 0.15 * target_elements:
            break
    else:
        raise GeometryError(
            f"cannot reach {target_elements} elements with {n_electrodes} electrodes"
        )
    counts = _ring_counts(n_b, n_layers)
    bfrac = [coverage * k / n_e for k in range(n_e)] + [
        coverage + (1.0 - coverage) * k / n_g for k in range(n_g)
    ]
    fracs = [[k / m for k in range(m)] for m in counts[:-1]] + [bfrac]

    L = n_electrodes
    sector = 2.0 * math.pi / L
    offset = -0.5 * coverage * sector

    # node numbering: 0 = centre, then ring by ring, sector-major within a ring
    nodes = [(0.0, 0.0)]
    ring_start = []
    for j, fr in enumerate(fracs, start=1):
        ring_start.append(len(nodes))
        r = radius * j / n_layers
        for s in range(L):
            for f in fr:
                t = offset + (s + f) * sector
                nodes.append((r * math.cos(t), r * math.sin(t)))
    nodes = np.array(nodes)

    def node_id(ring: int, s: int, k: int) -> int:
        m = len(fracs[ring])
        if k >= m:
            s, k = (s + 1) % L, k - m
        return ring_start[ring] + s * m + k

    elements = []
    m1 = len(fracs[0])
    for s in range(L):
        for k in range(m1):
            elements.append((0, node_id(0, s, k), node_id(0, s, k + 1)))
    for ring in range(len(fracs) - 1):
        pattern = _strip(fracs[ring], fracs[ring + 1])
        for s in range(L):
            for kind, i, j in pattern:
                a = node_id(ring, s, i)
                b = node_id(ring + 1, s, j)
                if kind == "in":
                    elements.append((a, b, node_id(ring, s, i + 1)))
                else:
                    elements.append((a, b, node_id(ring + 1, s, j + 1)))
    elements = np.array(elements, dtype=np.int64)

    outer = len(fracs) - 1
    boundary_edges = []
    electrode_edges = []
    for s in range(L):
        group = []
        for k in range(n_b):
            if k < n_e:
                group.append(len(boundary_edges))
            boundary_edges.append((node_id(outer, s, k), node_id(outer, s, k + 1)))
        electrode_edges.append(group)
    boundary_edges = np.array(boundary_edges, dtype=np.int64)

    nodes = _smooth(nodes, elements, np.unique(boundary_edges), smoothing_sweeps)
    return Mesh(
        nodes,
        elements,
        boundary_edges,
        electrode_edges,
        float(radius),
        float(coverage),
        tag=f"disk-L{L}-c{coverage:g}-M{len(elements)}",
        meta={"layers": n_layers, "edges_per_electrode": n_e, "edges_per_gap": n_g},
    )


def _signed_areas(nodes, elements):
    p = nodes[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _smooth(nodes, elements, fixed, sweeps, weight=0.5):
    """Damped Laplacian smoothing of free nodes; a sweep is rejected if it
    would shrink the smallest element below half its previous size."""
    if sweeps <= 0:
        return nodes
    n = len(nodes)
    e = elements
    rows = np.concatenate([e[:, 0], e[:, 1], e[:, 2], e[:, 1], e[:, 2], e[:, 0]])
    cols = np.concatenate([e[:, 1], e[:, 2], e[:, 0], e[:, 0], e[:, 1], e[:, 2]])
    adj = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    free = np.ones(n, dtype=bool)
    free[fixed] = False
    free[0] = False  # keep the centre node on the symmetry axis
    for _ in range(sweeps):
        avg = (adj @ nodes) / deg[:, None]
        trial = nodes.copy()
        trial[free] = (1 - weight) * nodes[free] + weight * avg[free]
        a_old = _signed_areas(nodes, elements).min()
        if _signed_areas(trial, elements).min() < 0.5 * a_old:
            break
        nodes = trial
    return nodes


# ---------------------------------------------------------------------------
# pixel grids


@dataclass
class PixelGrid:
    """n x n image over [-1, 1]^2 (scaled by the mesh radius), row 0 at the top."""

    resolution: int
    values: np.ndarray
    inside_mask: np.ndarray
    fill: float = 0.0
    radius: float = 1.0

    @staticmethod
    def pixel_centers(resolution: int, radius: float = 1.0):
        h = 2.0 * radius / resolution
        c = -radius + h * (np.arange(resolution) + 0.5)
        x, y = np.meshgrid(c, c[::-1])
        return x, y


def _trifinder(mesh: Mesh):
    from matplotlib.tri import Triangulation

    tri = Triangulation(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.elements)
    return tri, tri.get_trifinder()


def locate_points(mesh: Mesh, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Index of the element containing each point; -1 for points outside the disk.

    Points inside the circle but outside the inscribed polygon are pulled
    radially inward before the lookup.
    """
    _, finder = _trifinder(mesh)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    idx = np.asarray(finder(x, y))
    r = np.hypot(x, y)
    lost = (idx < 0) & (r <= mesh.radius)
    if np.any(lost):
        half = np.max(mesh.boundary_edge_lengths) / (2.0 * mesh.radius)
        shrink = math.cos(math.asin(min(half, 1.0))) * (1.0 - 1e-9)
        scale = np.minimum(1.0, shrink * mesh.radius / np.maximum(r[lost], 1e-300))
        idx[lost] = finder(x[lost] * scale, y[lost] * scale)
    return idx


def mesh_to_grid(mesh: Mesh, field_values, resolution: int = 64, fill: float = 0.0) -> PixelGrid:
    """Sample an element-wise or node-wise field on an n x n pixel grid."""
    f = np.asarray(field_values, dtype=float)
    if f.ndim != 1 or len(f) not in (mesh.n_elements, mesh.n_nodes):
        raise DimensionError(
            f"field of length {f.shape} matches neither {mesh.n_elements} elements "
            f"nor {mesh.n_nodes} nodes"
        )
    if resolution < 1:
        raise DimensionError("resolution must be positive")
    x, y = PixelGrid.pixel_centers(resolution, mesh.radius)
    inside = np.hypot(x, y) <= mesh.radius
    values = np.full(x.shape, float(fill))
    idx = locate_points(mesh, x[inside], y[inside])
    if len(f) == mesh.n_elements:
        vals = f[np.maximum(idx, 0)]
    else:
        px = np.column_stack([x[inside], y[inside]])
        tri = mesh.elements[np.maximum(idx, 0)]
        p = mesh.nodes[tri]
        lam = _barycentric(p, px)
        vals = np.einsum("pi,pi->p", lam, f[tri])
    vals = np.where(idx >= 0, vals, fill)
    values[inside] = vals
    return PixelGrid(resolution, values, inside, float(fill), mesh.radius)


def _barycentric(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    # p: (P, 3, 2) triangle corners, q: (P, 2) points
    v0 = p[:, 1] - p[:, 0]
    v1 = p[:, 2] - p[:, 0]
    v2 = q - p[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.column_stack([1.0 - l1 - l2, l1, l2])


def grid_to_mesh(grid: PixelGrid, mesh: Mesh) -> np.ndarray:
    """Bilinear interpolation of a pixel grid at the element centroids."""
    from scipy.interpolate import RegularGridInterpolator

    n = grid.resolution
    if n < 2:
        raise DimensionError("grid resolution must be at least 2")
    vals = np.asarray(grid.values, dtype=float)
    if vals.shape != (n, n):
        raise DimensionError(f"grid values have shape {vals.shape}, expected {(n, n)}")
    h = 2.0 * grid.radius / n
    c = -grid.radius + h * (np.arange(n) + 0.5)
    # rows run top to bottom, interpolator wants ascending y
    interp = RegularGridInterpolator((c, c), vals[::-1, :], method="linear")
    pts = np.clip(mesh.centroids[:, ::-1], c[0], c[-1])
    return interp(pts)

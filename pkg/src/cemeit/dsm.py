"""Cauchy-difference lifting and a direct-sampling type index map.

Each measured-minus-background voltage vector is injected as electrode
charges into the background CEM; the resulting interior potentials carry
the inclusion information.  The index at a node ``x`` is

    max_i |grad phi_i(x)| / (||diff_i|| * |eta_x|),

where ``eta_x(xi) = d . (xi - x) / (pi |xi - x|^2)`` is the dipole probe on
the boundary in direction ``d = grad phi_i / |grad phi_i|`` and ``|eta_x|``
its L2(boundary) norm.  The map is finally scaled to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io
from .errors import DimensionError
from .fem import Conductivity, ElectrodeModel, assemble_cem_system
from .jacobian import element_gradients
from .mesh import Mesh


@dataclass
class LiftedField:
    fields: np.ndarray  # (K, N) nodal potentials
    electrode_potentials: np.ndarray  # (K, L)
    diff: np.ndarray  # (K, L) injected charges (mean-projected)
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.fields.shape[0]

    def save(self, path) -> None:
        """Multi-channel raw f64 stack (K x nodes) with a JSON sidecar."""
        io.write_raw(path, self.fields, channels=self.K, n_nodes=self.fields.shape[1],
                     diff=self.diff.tolist(), **self.meta)


def lift_cauchy_difference(
    mesh: Mesh,
    electrodes: ElectrodeModel,
    sigma0: Conductivity | None,
    voltage_diff: np.ndarray,
) -> LiftedField:
    """Solve the background CEM with electrode charges ``voltage_diff[i]``."""
    if sigma0 is None:
        sigma0 = Conductivity.constant(mesh, 1.0)
    diff = np.atleast_2d(np.asarray(voltage_diff, dtype=float))
    if diff.shape[1] != electrodes.L:
        if diff.size % electrodes.L:
            raise DimensionError(f"voltage differences do not split into rows of {electrodes.L}")
        diff = diff.reshape(-1, electrodes.L)
    diff = diff - diff.mean(axis=1, keepdims=True)
    if not np.any(diff):
        return LiftedField(np.zeros((len(diff), mesh.n_nodes)), np.zeros_like(diff), diff)
    system = assemble_cem_system(mesh, sigma0, electrodes)
    phi, V = system.solve_currents(diff)
    return LiftedField(phi, V, diff)


def nodal_gradients(mesh: Mesh, fields: np.ndarray) -> np.ndarray:
    """Area-weighted average of element gradients at nodes: (K, N, 2)."""
    ge = element_gradients(mesh, fields)  # (K, M, 2)
    W = mesh.node_to_element_average.T.multiply(1.0).tocsr()  # (N, M), entries 1/3
    A = W @ mesh.element_areas
    out = np.empty((ge.shape[0], mesh.n_nodes, 2))
    wa = W.multiply(mesh.element_areas[None, :]).tocsr()
    for k in range(ge.shape[0]):
        out[k] = (wa @ ge[k]) / A[:, None]
    return out


def probe_gram(mesh: Mesh, points: np.ndarray | None = None) -> np.ndarray:
    """2x2 matrices ``G(x)`` with ``|eta_x|^2 = d^T G(x) d`` (boundary-edge
    midpoint quadrature).  Points on the boundary get ``inf`` (the probe is
    not square integrable there) and are marked NaN."""
    if points is None:
        points = mesh.nodes
    b = mesh.boundary_edges
    mid = 0.5 * (mesh.nodes[b[:, 0]] + mesh.nodes[b[:, 1]])
    w = mesh.boundary_edge_lengths
    G = np.zeros((len(points), 2, 2))
    for s in range(0, len(points), 512):
        r = mid[None, :, :] - points[s : s + 512, None, :]  # (P, E, 2)
        r2 = np.sum(r**2, axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            k = r / (np.pi * r2[..., None])
            G[s : s + 512] = np.einsum("pe,pei,pej->pij", np.broadcast_to(w, r2.shape), k, k)
    on_boundary = np.abs(np.linalg.norm(points, axis=1) - mesh.radius) < 1e-12 * mesh.radius
    if points is mesh.nodes:
        on_boundary |= np.isin(np.arange(len(points)), mesh.boundary_nodes)
    G[on_boundary | ~np.isfinite(G).all(axis=(1, 2))] = np.nan
    return G


def dsm_index(fields: LiftedField, mesh: Mesh, aggregate: str = "max") -> np.ndarray:
    """Nodal index map scaled to [0, 1]; all-zero input gives zeros."""
    norms = np.linalg.norm(fields.diff, axis=1)
    active = norms > 0
    if not np.any(active):
        return np.zeros(mesh.n_nodes)
    grads = nodal_gradients(mesh, fields.fields[active])
    G = probe_gram(mesh)
    mag = np.linalg.norm(grads, axis=2)  # (K, N)
    d = grads / np.where(mag > 0, mag, 1.0)[..., None]
    finite = np.isfinite(G).all(axis=(1, 2))
    eta = np.full(mag.shape, np.inf)
    eta[:, finite] = np.sqrt(np.einsum("kni,nij,knj->kn", d[:, finite], G[finite], d[:, finite]))
    idx = mag / (norms[active, None] * np.where(eta > 0, eta, np.inf))
    agg = idx.max(axis=0) if aggregate == "max" else idx.mean(axis=0)
    m = agg.max()
    return agg / m if m > 0 else np.zeros(mesh.n_nodes)

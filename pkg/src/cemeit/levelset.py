"""Two-level-set reconstruction of a three-phase conductivity.

Regions by sign (phi > 0 on the "positive" side)::

    phi1 > 0, phi2 > 0  -> sigma1 (background)
    phi1 > 0, phi2 <= 0 -> sigma2 (conductive)
    phi1 <= 0, phi2 > 0 -> sigma3 (resistive)
    phi1 <= 0, phi2 <= 0 -> sigma4 (background)

The smoothed parametrization uses ``H(s) = atan(s / eps) / pi + 1/2`` applied
to the element means of the nodal level set functions.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import (
    Conductivity,
    CurrentPatterns,
    ElectrodeModel,
    MeasurementFrame,
    assemble_cem_system,
    solve_forward,
)
from .gauss_newton import build_tv_operator, tv_value
from .jacobian import Jacobian, adjoint_solve, coefficient_gradient
from .mesh import Mesh
from .metrics import BACKGROUND, CONDUCTIVE, RESISTIVE, segment
from .result import ReconResult

log = logging.getLogger(__name__)


def heaviside(s, eps: float) -> np.ndarray:
    return np.arctan(np.asarray(s, dtype=float) / eps) / np.pi + 0.5


def dirac(s, eps: float) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return eps / (np.pi * (s**2 + eps**2))


@dataclass
class LevelSetState:
    phi1: np.ndarray
    phi2: np.ndarray
    values: tuple  # (sigma1, sigma2, sigma3, sigma4)
    eps: float
    step: float = 0.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if min(self.values) <= 0:
            raise ValueError("class values must be positive")


def _element_means(mesh: Mesh, state: LevelSetState):
    avg = mesh.node_to_element_average
    return avg @ state.phi1, avg @ state.phi2


def sigma_from_levelsets(state: LevelSetState, mesh: Mesh, bounds=(1e-3, 10.0)) -> Conductivity:
    """Element conductivity from the smoothed Heaviside composition."""
    p1, p2 = _element_means(mesh, state)
    h1, h2 = heaviside(p1, state.eps), heaviside(p2, state.eps)
    s1, s2, s3, s4 = state.values
    vals = s1 * h1 * h2 + s2 * h1 * (1 - h2) + s3 * (1 - h1) * h2 + s4 * (1 - h1) * (1 - h2)
    return Conductivity(vals, "element", bounds)


def hard_segmentation(state: LevelSetState, mesh: Mesh) -> np.ndarray:
    """Labels (0 resistive, 1 background, 2 conductive) from the sharp
    Heaviside at element centroids."""
    p1, p2 = _element_means(mesh, state)
    lab = np.full(mesh.n_elements, BACKGROUND)
    lab[(p1 > 0) & (p2 <= 0)] = CONDUCTIVE
    lab[(p1 <= 0) & (p2 > 0)] = RESISTIVE
    return lab


def sharp_sigma(state: LevelSetState, mesh: Mesh) -> np.ndarray:
    """Piecewise constant conductivity of the sharp partition (<= 4 values)."""
    p1, p2 = _element_means(mesh, state)
    s1, s2, s3, s4 = state.values
    return np.select([(p1 > 0) & (p2 > 0), (p1 > 0), (p2 > 0)], [s1, s2, s3], s4)


def sigma_derivatives(state: LevelSetState, mesh: Mesh):
    """Element-wise d sigma / d(mean phi_i)."""
    p1, p2 = _element_means(mesh, state)
    h1, h2 = heaviside(p1, state.eps), heaviside(p2, state.eps)
    s1, s2, s3, s4 = state.values
    d1 = dirac(p1, state.eps) * (s1 * h2 + s2 * (1 - h2) - s3 * h2 - s4 * (1 - h2))
    d2 = dirac(p2, state.eps) * (s1 * h1 - s2 * h1 + s3 * (1 - h1) - s4 * (1 - h1))
    return d1, d2


def levelset_gradient(
    state: LevelSetState,
    J,
    residual: np.ndarray,
    tv_weight: float,
    mesh: Mesh,
    tv_op=None,
):
    """Nodal gradients of ``1/2 ||r||^2 + tv_weight * TV(sigma)``.

    ``J`` is a P0 :class:`Jacobian` (or its matrix) at the current sigma, or
    directly the element gradient of the data term (length M); ``residual``
    is ``F(sigma) - F(sigma0) - (U - U0)``.
    """
    if isinstance(J, Jacobian):
        J = J.matrix
    J = np.asarray(J)
    if J.ndim == 2:
        g_sigma = J.T @ np.asarray(residual, dtype=float).ravel()
    else:
        g_sigma = J.copy()
    if len(g_sigma) != mesh.n_elements:
        raise ValueError("data gradient must be an element field")
    if tv_weight > 0:
        if tv_op is None:
            tv_op = build_tv_operator(mesh, 1e-4)
        sigma = sigma_from_levelsets(state, mesh).values
        d = tv_op.matrix @ sigma
        g_sigma = g_sigma + tv_weight * (tv_op.matrix.T @ (d / np.sqrt(d**2 + tv_op.gamma)))
    d1, d2 = sigma_derivatives(state, mesh)
    avgT = mesh.node_to_element_average.T
    return avgT @ (g_sigma * d1), avgT @ (g_sigma * d2)


# ---------------------------------------------------------------------------
# redistancing


def _interface_segments(phi: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Zero contour of a P1 field as segments (S, 2, 2) (marching triangles)."""
    e = mesh.elements
    v = phi[e]
    x = mesh.nodes[e]
    pts = []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        va, vb = v[:, a], v[:, b]
        cross = va * vb < 0
        t = np.where(cross, va / np.where(cross, va - vb, 1.0), 0.0)
        p = x[:, a] + t[:, None] * (x[:, b] - x[:, a])
        pts.append(np.where(cross[:, None], p, np.nan))
    # nodes lying exactly on the interface
    for a in range(3):
        on = v[:, a] == 0
        pts.append(np.where(on[:, None], x[:, a], np.nan))
    P = np.stack(pts, axis=1)  # (M, 6, 2)
    ok = ~np.isnan(P[..., 0])
    segs = []
    for k in np.flatnonzero(ok.sum(axis=1) >= 1):
        q = P[k][ok[k]]
        if len(q) == 1:
            segs.append((q[0], q[0]))
        else:
            for i in range(len(q) - 1):
                segs.append((q[i], q[i + 1]))
    if not segs:
        return np.zeros((0, 2, 2))
    return np.asarray(segs)


def _distance_to_segments(points: np.ndarray, segs: np.ndarray, chunk: int = 512) -> np.ndarray:
    a = segs[:, 0]
    ab = segs[:, 1] - a
    ab2 = np.maximum(np.sum(ab**2, axis=1), 1e-300)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk, None, :]
        t = np.clip(np.sum((p - a) * ab, axis=2) / ab2, 0.0, 1.0)
        d = np.linalg.norm(p - (a + t[..., None] * ab), axis=2)
        out[s : s + chunk] = d.min(axis=1)
    return out


def reinitialize(phi: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Signed distance to the piecewise linear zero contour of ``phi``.

    Signs are kept node by node.  A field without a zero contour has no
    finite distance; its magnitudes are raised to at least the domain
    diameter (an all-zero field becomes positive).
    """
    phi = np.asarray(phi, dtype=float)
    segs = _interface_segments(phi, mesh) if np.any(phi) else np.zeros((0, 2, 2))
    if len(segs) == 0:
        sign = np.where(phi < 0, -1.0, 1.0)
        return sign * np.maximum(np.abs(phi), 2.0 * mesh.radius)
    d = _distance_to_segments(mesh.nodes, segs)
    return np.sign(phi) * d


# ---------------------------------------------------------------------------
# initialization and driver


def init_from_linearized(delta_sigma, mesh: Mesh, background: float = 1.31):
    """Level set pair from an Otsu segmentation of a linearized reconstruction.

    Conductive elements go to the (phi1 > 0, phi2 <= 0) region, resistive
    ones to (phi1 <= 0, phi2 > 0), the rest to (+, +).  Returns
    ``(phi1, phi2, flags)``.
    """
    ds = delta_sigma.values if isinstance(delta_sigma, Conductivity) else np.asarray(delta_sigma)
    if len(ds) == mesh.n_nodes and len(ds) != mesh.n_elements:
        ds = mesh.node_to_element_average @ ds
    flags = {}
    labels, res = segment(background + ds, weights=mesh.element_areas, background=background)
    if res.degenerate or np.all(labels == BACKGROUND):
        flags["degenerate_init"] = True
    # node membership: area-weighted vote of the adjacent elements
    avgT = mesh.node_to_element_average.T
    wsum = avgT @ mesh.element_areas
    cond = (avgT @ (mesh.element_areas * (labels == CONDUCTIVE))) / wsum > 0.5
    resi = (avgT @ (mesh.element_areas * (labels == RESISTIVE))) / wsum > 0.5
    phi1 = np.where(resi, -1.0, 1.0)
    phi2 = np.where(cond, -1.0, 1.0)
    return reinitialize(phi1, mesh), reinitialize(phi2, mesh), flags


@dataclass
class LevelSetConfig:
    alpha: float = 5e-8
    sigma_high: float = 5.0
    sigma_low: float = 0.1
    background: float = 1.31
    eps: float | None = None  # default: 2 x median edge length
    iterations: int = 1000
    reinit_every: int = 50
    first_step_change: float = 0.5  # max |dphi| of the first update, in units of eps
    tv_gamma: float = 1e-4
    bounds: tuple = (1e-3, 10.0)
    record_every: int = 1
    check_hull: bool = True

    def class_values(self):
        b = self.background
        return (b, self.sigma_high, self.sigma_low, b)


def levelset_reconstruct(
    data: MeasurementFrame,
    mesh: Mesh,
    electrodes: ElectrodeModel,
    patterns: CurrentPatterns,
    baseline: MeasurementFrame,
    cfg: LevelSetConfig | None = None,
    init: tuple | None = None,
    linear=None,
) -> ReconResult:
    """Gradient descent on the difference-data functional with periodic
    redistancing.

    ``init`` is an optional ``(phi1, phi2)``; otherwise ``linear`` (a
    :class:`cemeit.linear.LinearReconstructor` on ``mesh``) supplies the
    initial segmentation from the same difference data.
    """
    cfg = cfg or LevelSetConfig()
    t0 = time.perf_counter()
    eps = cfg.eps if cfg.eps is not None else 2.0 * mesh.median_edge_length()
    flags: dict = {}
    if init is None:
        if linear is None:
            raise ValueError("either init or a linear reconstructor is required")
        ds = linear.matrix @ (data.voltages - baseline.voltages)
        phi1, phi2, f = init_from_linearized(ds, mesh, cfg.background)
        flags.update(f)
    else:
        phi1, phi2 = (np.asarray(p, dtype=float).copy() for p in init)
    state = LevelSetState(phi1, phi2, cfg.class_values(), eps)
    vals = np.array(state.values)
    lo_hull, hi_hull = vals.min(), vals.max()

    sigma0 = Conductivity.constant(mesh, cfg.background, bounds=cfg.bounds)
    F0 = solve_forward(assemble_cem_system(mesh, sigma0, electrodes), patterns).stacked
    target = data.voltages - baseline.voltages
    tv_op = build_tv_operator(mesh, cfg.tv_gamma)

    history = []
    hull_ok = True
    for it in range(cfg.iterations + 1):
        sigma = sigma_from_levelsets(state, mesh, cfg.bounds)
        if cfg.check_hull and (sigma.values.min() < lo_hull - 1e-12
                               or sigma.values.max() > hi_hull + 1e-12):
            hull_ok = False
        system = assemble_cem_system(mesh, sigma, electrodes)
        fwd = solve_forward(system, patterns)
        r = fwd.stacked - F0 - target
        obj = 0.5 * float(r @ r) + cfg.alpha * tv_value(sigma, tv_op)
        if it % cfg.record_every == 0 or it == cfg.iterations:
            history.append(dict(iteration=it, objective=obj, misfit=0.5 * float(r @ r),
                                sigma_min=float(sigma.values.min()),
                                sigma_max=float(sigma.values.max()),
                                time=time.perf_counter() - t0))
        if it == cfg.iterations:
            break
        adj = adjoint_solve(system, r.reshape(patterns.K, -1))
        g_el = coefficient_gradient(fwd, adj, mesh, "element")
        g1, g2 = levelset_gradient(state, g_el, None, cfg.alpha, mesh, tv_op)
        if it == 0:
            gmax = max(np.max(np.abs(g1)), np.max(np.abs(g2)))
            state.step = cfg.first_step_change * eps / gmax if gmax > 0 else 0.0
            if gmax == 0:
                flags["zero_gradient"] = True
                break
        state.phi1 = state.phi1 - state.step * g1
        state.phi2 = state.phi2 - state.step * g2
        if cfg.reinit_every and (it + 1) % cfg.reinit_every == 0:
            state.phi1 = reinitialize(state.phi1, mesh)
            state.phi2 = reinitialize(state.phi2, mesh)
    flags["hull_ok"] = hull_ok
    flags["eps"] = eps
    flags["step"] = state.step
    result = ReconResult(sigma_from_levelsets(state, mesh, cfg.bounds), "levelset", history,
                         time.perf_counter() - t0, flags,
                         segmentation=hard_segmentation(state, mesh))
    result.flags["state"] = state
    return result

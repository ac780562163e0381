"""Sparsity-promoting reconstruction of a conductivity perturbation.

The perturbation ``dsigma`` is a P1 field vanishing on the boundary and is
penalized by the l1 norm of its nodal coefficients.  Iterations use the
H^1_0 (Sobolev) gradient, Barzilai-Borwein step lengths and a non-monotone
(max over the last ``memory`` objectives) sufficient-decrease test.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse.linalg import splu

from .errors import NumericalError, ValidationError
from .fem import (
    Conductivity,
    CurrentPatterns,
    ElectrodeModel,
    MeasurementFrame,
    assemble_cem_system,
    solve_forward,
)
from .jacobian import adjoint_solve, coefficient_gradient
from .mesh import Mesh
from .result import ReconResult

log = logging.getLogger(__name__)


@dataclass
class SparsityConfig:
    alpha: float = 1e-4
    tau: float = 1e-5
    memory: int = 5
    shrink_factor: float = 0.5
    s_stop: float = 1e-6
    s_max: float = 1e3
    s_init: float | None = None  # None: first step changes max|dsigma| by init_change
    init_change: float = 0.5
    max_iters: int = 200
    max_backtracks: int = 60
    background: float = 1.31
    bounds: tuple = (1e-3, 10.0)

    def __post_init__(self):
        if self.alpha < 0 or self.tau <= 0 or self.s_stop <= 0 or self.s_max <= 0:
            raise ValidationError("alpha must be non-negative; tau, s_stop, s_max positive")
        if self.memory < 1:
            raise ValidationError("memory must be >= 1")
        if not 0 < self.shrink_factor < 1:
            raise ValidationError("shrink_factor must lie in (0, 1)")


def soft_shrink(v, lam: float) -> np.ndarray:
    """Proximal map of ``lam * ||.||_1``: ``sign(t) max(|t| - lam, 0)``."""
    if lam < 0:
        raise ValidationError("shrinkage threshold must be non-negative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


class SobolevSmoother:
    """Solves ``-Delta g + g = f`` with ``g = 0`` on the boundary (P1 FEM).

    The right-hand side is given as the load vector ``b_i = <f, phi_i>``;
    the result is the H^1_0 Riesz representer of that functional.
    """

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.H = (mesh.stiffness_matrix + mesh.mass_matrix).tocsr()
        self.interior = mesh.interior_nodes
        sub = self.H[self.interior][:, self.interior].tocsc()
        try:
            self._lu = splu(sub)
        except RuntimeError as exc:
            raise NumericalError(f"Sobolev system factorization failed: {exc}") from exc

    def from_load(self, load: np.ndarray) -> np.ndarray:
        g = np.zeros(self.mesh.n_nodes)
        g[self.interior] = self._lu.solve(np.asarray(load, dtype=float)[self.interior])
        return g

    def inner(self, a, b) -> float:
        """H^1 inner product of two P1 fields."""
        return float(a @ (self.H @ b))

    def norm2(self, a) -> float:
        return self.inner(a, a)


def sobolev_smooth(mesh: Mesh, raw_gradient: np.ndarray) -> np.ndarray:
    """H^1_0 gradient of a nodal field ``raw_gradient`` (interpreted as the P1
    function ``f``): solves ``-Delta g + g = f``, ``g|boundary = 0``."""
    f = np.asarray(raw_gradient, dtype=float)
    return SobolevSmoother(mesh).from_load(mesh.mass_matrix @ f)


@dataclass
class SparseIterate:
    delta: np.ndarray
    memory: int = 5
    history: deque = field(default_factory=deque)
    prev_delta: np.ndarray | None = None
    prev_grad: np.ndarray | None = None
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.history = deque(self.history, maxlen=self.memory)

    def push(self, objective: float) -> None:
        self.history.append(objective)

    @property
    def reference(self) -> float:
        return max(self.history)


def bb_curvature(dx: np.ndarray, dg: np.ndarray, inner) -> float | None:
    """Scalar secant curvature ``<dx, dg> / ||dx||^2`` (None if ``dx = 0``)."""
    den = inner(dx, dx)
    if den <= 0:
        return None
    return inner(dx, dg) / den


def bb_step(current: SparseIterate, cfg: SparsityConfig, inner, s_init: float) -> float:
    """Step length: reciprocal of the secant curvature, clipped to
    ``[s_stop, s_max]``; non-positive curvature gives ``s_max``."""
    if current.prev_delta is None or current.prev_grad is None or current.grad is None:
        return s_init
    c = bb_curvature(current.delta - current.prev_delta, current.grad - current.prev_grad, inner)
    if c is None:
        return s_init
    if c <= 0:
        return cfg.s_max
    return float(np.clip(1.0 / c, cfg.s_stop, cfg.s_max))


class _Problem:
    """Data misfit and its H^1_0 gradient for nodal perturbations."""

    def __init__(self, data, cfg, mesh, electrodes, patterns):
        self.U = data.voltages
        self.cfg = cfg
        self.mesh = mesh
        self.electrodes = electrodes
        self.patterns = patterns
        self.smoother = SobolevSmoother(mesh)
        self.boundary = mesh.boundary_nodes
        self.n_solves = 0

    def sigma(self, delta) -> Conductivity:
        lo, hi = self.cfg.bounds
        # delta was projected already; the clip only absorbs round-off
        return Conductivity(np.clip(self.cfg.background + delta, lo, hi), "node", self.cfg.bounds)

    def misfit(self, delta):
        system = assemble_cem_system(self.mesh, self.sigma(delta), self.electrodes)
        fwd = solve_forward(system, self.patterns)
        self.n_solves += 1
        r = fwd.stacked - self.U
        return 0.5 * float(r @ r), system, fwd, r

    def objective(self, delta, misfit) -> float:
        return misfit + self.cfg.alpha * float(np.sum(np.abs(delta)))

    def gradient(self, system, fwd, r) -> np.ndarray:
        adj = adjoint_solve(system, r.reshape(self.patterns.K, -1))
        load = coefficient_gradient(fwd, adj, self.mesh, "node")
        return self.smoother.from_load(load)

    def project(self, delta) -> np.ndarray:
        lo, hi = self.cfg.bounds
        out = np.clip(self.cfg.background + delta, lo, hi) - self.cfg.background
        out[self.boundary] = 0.0
        return out


def sparsity_reconstruct(
    data: MeasurementFrame,
    cfg: SparsityConfig,
    mesh: Mesh,
    electrodes: ElectrodeModel,
    patterns: CurrentPatterns,
) -> ReconResult:
    """Proximal Sobolev-gradient iterations; returns ``sigma0 + dsigma`` (P1).

    Each history row records the terms of the acceptance test
    (``objective``, ``reference`` = max of the last ``memory`` objectives,
    ``step``, ``change_h1`` = squared H^1 norm of the change) so the
    non-monotone decrease condition can be audited after the run.
    """
    t0 = time.perf_counter()
    prob = _Problem(data, cfg, mesh, electrodes, patterns)
    H = prob.smoother
    delta = np.zeros(mesh.n_nodes)
    mis, system, fwd, r = prob.misfit(delta)
    obj = prob.objective(delta, mis)
    it_state = SparseIterate(delta, cfg.memory)
    it_state.push(obj)
    it_state.grad = prob.gradient(system, fwd, r)
    history = [dict(iteration=0, objective=obj, misfit=mis, reference=obj, step=0.0,
                    change_h1=0.0, backtracks=0, nonzeros=0, time=time.perf_counter() - t0)]
    flags: dict = {}

    gmax = float(np.max(np.abs(it_state.grad)))
    if gmax == 0:
        return ReconResult(prob.sigma(delta), "sparsity", history, time.perf_counter() - t0,
                           {"zero_gradient": True})
    s_init = cfg.s_init if cfg.s_init is not None else cfg.init_change / gmax

    for it in range(1, cfg.max_iters + 1):
        s = bb_step(it_state, cfg, H.inner, s_init)
        if s < cfg.s_stop:
            flags["stopped"] = "step_below_threshold"
            break
        ref = it_state.reference
        accepted = False
        for nb in range(cfg.max_backtracks + 1):
            cand = prob.project(soft_shrink(it_state.delta - s * it_state.grad, s * cfg.alpha))
            change = H.norm2(cand - it_state.delta)
            c_mis, c_sys, c_fwd, c_r = prob.misfit(cand)
            c_obj = prob.objective(cand, c_mis)
            if c_obj <= ref - cfg.tau * s / 2 * change:
                accepted = True
                break
            s *= cfg.shrink_factor
            if s < cfg.s_stop:
                break
        if not accepted:
            flags["stopped"] = "backtracking_exhausted"
            log.info("sparsity: backtracking exhausted at iteration %d", it)
            break
        grad = prob.gradient(c_sys, c_fwd, c_r)
        it_state.prev_delta, it_state.prev_grad = it_state.delta, it_state.grad
        it_state.delta, it_state.grad = cand, grad
        it_state.push(c_obj)
        history.append(dict(iteration=it, objective=c_obj, misfit=c_mis, reference=ref, step=s,
                            change_h1=change, backtracks=nb,
                            nonzeros=int(np.count_nonzero(cand)), time=time.perf_counter() - t0))
        if change == 0:
            flags["stopped"] = "stationary"
            break
    else:
        flags["stopped"] = "max_iters"
    result = ReconResult(prob.sigma(it_state.delta), "sparsity", history,
                         time.perf_counter() - t0, flags)
    result.flags["tau"] = cfg.tau
    result.flags["forward_solves"] = prob.n_solves
    return result


def config_dict(cfg: SparsityConfig) -> dict:
    return asdict(cfg)

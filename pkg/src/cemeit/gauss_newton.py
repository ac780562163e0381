"""Gauss-Newton reconstruction with a smoothed total-variation penalty.

Each iteration minimizes the lagged-diffusivity quadratic model of

    Phi(sigma) = 1/2 ||F(sigma) I - U_delta||^2 + alpha * sum_i sqrt((L sigma)_i^2 + gamma)

which gives the update

    (J^T J + alpha L^T D^-1 L) dsigma = J^T r - alpha L^T D^-1 L sigma_k,
    D = diag(sqrt((L sigma_k)^2 + gamma)),  r = U_delta - F(sigma_k) I.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg, splu

from .errors import NumericalError, ValidationError
from .fem import (
    Conductivity,
    CurrentPatterns,
    ElectrodeModel,
    MeasurementFrame,
    assemble_cem_system,
    solve_forward,
)
from .jacobian import Jacobian, jacobian_from_system
from .mesh import Mesh
from .result import ReconResult

log = logging.getLogger(__name__)

NORMAL_RTOL = 1e-10


@dataclass(eq=False)
class TvOperator:
    """Inter-element differences; one row per interior edge."""

    matrix: sparse.csr_matrix
    gamma: float
    weighted: bool = True

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]


def build_tv_operator(mesh: Mesh, gamma: float, weighted: bool = True) -> TvOperator:
    """Rows ``w_e (sigma_a - sigma_b)`` for elements ``a, b`` sharing edge ``e``;
    ``w_e`` is the edge length (``weighted``) or 1."""
    if gamma <= 0:
        raise ValidationError("gamma must be positive")
    pairs, lengths = mesh.interior_edges
    n = len(pairs)
    w = lengths if weighted else np.ones(n)
    rows = np.repeat(np.arange(n), 2)
    cols = pairs.ravel()
    vals = np.stack([w, -w], axis=1).ravel()
    mat = sparse.csr_matrix((vals, (rows, cols)), shape=(n, mesh.n_elements))
    return TvOperator(mat, float(gamma), weighted)


def _values(sigma) -> np.ndarray:
    return sigma.values if isinstance(sigma, Conductivity) else np.asarray(sigma, dtype=float)


def tv_value(sigma, op: TvOperator) -> float:
    d = op.matrix @ _values(sigma)
    return float(np.sum(np.sqrt(d**2 + op.gamma)))


def tv_weights(sigma, op: TvOperator) -> sparse.csr_matrix:
    """The lagged-diffusivity matrix L^T D^-1 L at ``sigma``."""
    d = op.matrix @ _values(sigma)
    dinv = 1.0 / np.sqrt(d**2 + op.gamma)
    return (op.matrix.T @ sparse.diags(dinv) @ op.matrix).tocsr()


@dataclass
class GnConfig:
    alpha: float = 3e-4
    gamma: float = 1e-2
    max_iters: int = 20
    step_damping: float = 1.0
    stop_tol: float = 1e-4
    recompute_jacobian: bool = True
    weighted_tv: bool = True
    bounds: tuple = (1e-3, 10.0)
    background: float = 1.31
    max_halvings: int = 3

    def __post_init__(self):
        if self.alpha <= 0 or self.gamma <= 0:
            raise ValidationError("alpha and gamma must be positive")
        if not 0 < self.step_damping <= 1:
            raise ValidationError("step_damping must lie in (0, 1]")


def solve_regularized_normal(J: np.ndarray, W: sparse.spmatrix, rhs: np.ndarray,
                             rtol: float = NORMAL_RTOL) -> np.ndarray:
    """Solve ``(J^T J + W) x = rhs`` for sparse PSD ``W`` and a short, wide ``J``.

    Preconditioned CG with the exact inverse of ``J^T J + W + eps I``
    (Woodbury: one sparse factorization plus a small dense Cholesky), so CG
    only has to remove the tiny shift.
    """
    m = J.shape[1]
    diag_scale = max(float(np.mean(W.diagonal())), float(np.mean(np.sum(J * J, axis=0))), 1e-300)
    eps = 1e-6 * diag_scale
    A_eps = (W + eps * sparse.identity(m, format="csr")).tocsc()
    lu = splu(A_eps)
    AiJt = lu.solve(np.ascontiguousarray(J.T))
    S = J @ AiJt
    S[np.diag_indices_from(S)] += 1.0
    try:
        fac = cho_factor(S, lower=True)
    except LinAlgError as exc:
        raise NumericalError(f"regularized normal matrix is singular: {exc}") from exc

    def prec(v):
        y = lu.solve(v)
        return y - AiJt @ cho_solve(fac, J @ y)

    def op(v):
        return J.T @ (J @ v) + W @ v

    A = LinearOperator((m, m), matvec=op, dtype=float)
    M = LinearOperator((m, m), matvec=prec, dtype=float)
    x0 = prec(rhs)
    bn = np.linalg.norm(rhs)
    if bn == 0:
        return np.zeros(m)
    x, info = cg(A, rhs, x0=x0, rtol=rtol, maxiter=200, M=M)
    rel = np.linalg.norm(op(x) - rhs) / bn
    if rel > max(rtol * 100, 1e-8):
        raise NumericalError(f"normal equations residual {rel:.2e}", residual=float(rel))
    return x


def gn_tv_step(sigma_k, J, residual: np.ndarray, cfg: GnConfig, op: TvOperator) -> np.ndarray:
    """One lagged-diffusivity Gauss-Newton update ``dsigma_k``."""
    Jm = J.matrix if isinstance(J, Jacobian) else np.asarray(J)
    s = _values(sigma_k)
    W = cfg.alpha * tv_weights(s, op)
    # apply L^T D^-1 L s factor by factor: exactly zero for constant sigma
    d = op.matrix @ s
    tv_grad = op.matrix.T @ (d / np.sqrt(d**2 + op.gamma))
    rhs = Jm.T @ np.asarray(residual, dtype=float).ravel() - cfg.alpha * tv_grad
    if not np.any(rhs):
        return np.zeros_like(s)
    return solve_regularized_normal(Jm, W, rhs)


def gn_tv_reconstruct(
    data: MeasurementFrame,
    cfg: GnConfig,
    mesh: Mesh,
    electrodes: ElectrodeModel,
    patterns: CurrentPatterns,
    sigma0: Conductivity | None = None,
) -> ReconResult:
    """Damped Gauss-Newton iterations projected onto the admissible box."""
    t0 = time.perf_counter()
    lo, hi = cfg.bounds
    op = build_tv_operator(mesh, cfg.gamma, cfg.weighted_tv)
    if sigma0 is None:
        sigma0 = Conductivity.constant(mesh, cfg.background, bounds=cfg.bounds)
    sigma = sigma0
    U = data.voltages

    system = assemble_cem_system(mesh, sigma, electrodes)
    fwd = solve_forward(system, patterns)
    r = U - fwd.stacked
    misfit = 0.5 * float(r @ r)
    obj = misfit + cfg.alpha * tv_value(sigma, op)
    history = [dict(iteration=0, misfit=misfit, tv=tv_value(sigma, op), objective=obj,
                    step=0.0, time=time.perf_counter() - t0)]
    flags: dict = {}
    J = None
    for it in range(1, cfg.max_iters + 1):
        if J is None or cfg.recompute_jacobian:
            J, _ = jacobian_from_system(system, patterns, fwd)
        ds = gn_tv_step(sigma, J, r, cfg, op)
        eta = cfg.step_damping
        accepted = False
        for _ in range(cfg.max_halvings + 1):
            trial = sigma.with_values(np.clip(sigma.values + eta * ds, lo, hi))
            t_sys = assemble_cem_system(mesh, trial, electrodes)
            t_fwd = solve_forward(t_sys, patterns)
            t_r = U - t_fwd.stacked
            t_mis = 0.5 * float(t_r @ t_r)
            t_tv = tv_value(trial, op)
            t_obj = t_mis + cfg.alpha * t_tv
            if t_obj <= obj:
                accepted = True
                break
            eta *= 0.5
        if not accepted:
            # typically the noise floor; the current iterate is the best one
            flags["no_descent"] = it
            log.info("GN-TV: no damped step decreased the objective at iteration %d", it)
            break
        decrease = (obj - t_obj) / max(obj, 1e-300)
        sigma, system, fwd, r, obj = trial, t_sys, t_fwd, t_r, t_obj
        history.append(dict(iteration=it, misfit=t_mis, tv=t_tv, objective=t_obj,
                            step=eta, time=time.perf_counter() - t0))
        if decrease < cfg.stop_tol:
            break
    return ReconResult(sigma, "gn_tv", history, time.perf_counter() - t0, flags)


def config_dict(cfg: GnConfig) -> dict:
    return asdict(cfg)

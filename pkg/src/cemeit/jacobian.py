"""Sensitivities of the electrode voltages with respect to conductivity.

The Jacobian uses the auxiliary-field construction: one solve per current
pattern and one per electrode (unit charge), all against a single
factorization.  For a P0 coefficient on element ``T``::

    dU^(k)_l / dsigma_T = -|T| grad u^(k) . grad w^(l)

and P1 coefficients follow by the chain rule through the element mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import splu

from .errors import DimensionError
from .fem import (
    CemSystem,
    Conductivity,
    CurrentPatterns,
    ElectrodeModel,
    ForwardSolution,
    assemble_cem_system,
    solve_forward,
)
from .mesh import Mesh


@dataclass
class Jacobian:
    matrix: np.ndarray  # (K*L, M), rows pattern-major
    basis: str  # "element" or "node"
    sigma: Conductivity

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, other):
        return self.matrix @ other


@dataclass
class AdjointSolution:
    potentials: np.ndarray  # (K, N)
    voltages: np.ndarray  # (K, L)


def element_gradients(mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
    """Per-element gradients of P1 fields; ``nodal`` is (K, N) -> (K, M, 2)."""
    nodal = np.atleast_2d(nodal)
    return np.einsum("kei,eid->ked", nodal[:, mesh.elements], mesh.basis_gradients)


def jacobian_from_system(
    system: CemSystem, patterns: CurrentPatterns, forward: ForwardSolution | None = None
) -> tuple[Jacobian, ForwardSolution]:
    """Jacobian at the system's conductivity using K + L solves."""
    mesh = system.mesh
    if forward is None:
        forward = solve_forward(system, patterns)
    L = system.electrodes.L
    w, _ = system.solve_currents(np.eye(L))
    gu = element_gradients(mesh, forward.potentials)
    gw = element_gradients(mesh, w)
    jac = -np.einsum("ked,led->kle", gu, gw) * mesh.element_areas
    jac = jac.reshape(patterns.K * L, mesh.n_elements)
    sigma = system.sigma
    if sigma.representation == "node":
        jac = np.asarray((mesh.node_to_element_average.T @ jac.T).T)
    return Jacobian(jac, sigma.representation, sigma), forward


def compute_jacobian(
    mesh: Mesh, sigma: Conductivity, electrodes: ElectrodeModel, patterns: CurrentPatterns
) -> Jacobian:
    system = assemble_cem_system(mesh, sigma, electrodes)
    return jacobian_from_system(system, patterns)[0]


def adjoint_solve(system: CemSystem, residual: np.ndarray) -> AdjointSolution:
    """Solve the CEM with the per-pattern residuals injected as currents.

    Residual rows are projected onto mean-free vectors first; the projection
    does not change the gradient because voltage perturbations are mean-free.
    """
    r = np.atleast_2d(np.asarray(residual, dtype=float))
    if r.shape[1] != system.electrodes.L:
        r = r.reshape(-1, system.electrodes.L)
    r = r - r.mean(axis=1, keepdims=True)
    if not np.any(r):
        return AdjointSolution(np.zeros((r.shape[0], system.mesh.n_nodes)), np.zeros_like(r))
    p, P = system.solve_currents(r)
    return AdjointSolution(p, P)


def gradient_data_fit(
    forward: ForwardSolution, adjoint: AdjointSolution, mesh: Mesh, basis: str = "element"
) -> np.ndarray:
    """L2 representer of the derivative of 1/2 ||U(sigma) - U_delta||^2.

    For ``basis="element"`` this is the piecewise constant field
    ``-sum_k grad u_k . grad p_k``; for ``"node"`` it is the P1 function whose
    mass-weighted coefficients equal the derivative with respect to the
    nodal values.  Use :func:`coefficient_gradient` for the plain derivative.
    """
    d = coefficient_gradient(forward, adjoint, mesh, basis)
    if basis == "element":
        return d / mesh.element_areas
    return splu(mesh.mass_matrix.tocsc()).solve(d)


def coefficient_gradient(
    forward: ForwardSolution, adjoint: AdjointSolution, mesh: Mesh, basis: str = "element"
) -> np.ndarray:
    """Derivative of 1/2 ||U - U_delta||^2 with respect to the basis coefficients
    (equals ``J^T r``)."""
    if forward.potentials.shape != adjoint.potentials.shape:
        raise DimensionError(
            f"forward {forward.potentials.shape} and adjoint {adjoint.potentials.shape} differ"
        )
    gu = element_gradients(mesh, forward.potentials)
    gp = element_gradients(mesh, adjoint.potentials)
    d = -np.einsum("ked,ked->e", gu, gp) * mesh.element_areas
    if basis == "node":
        d = mesh.node_to_element_average.T @ d
    return d


def data_misfit(system: CemSystem, patterns: CurrentPatterns, data: np.ndarray):
    """(1/2 ||F(sigma) I - U_delta||^2, forward solution)."""
    fwd = solve_forward(system, patterns)
    r = fwd.stacked - np.asarray(data).ravel()
    return 0.5 * float(r @ r), fwd

import math

import numpy as np
import pytest

from cemeit.errors import DimensionError
from cemeit.fem import Conductivity, assemble_cem_system, forward_voltages, solve_forward
from cemeit.jacobian import (
    adjoint_solve,
    coefficient_gradient,
    compute_jacobian,
    data_misfit,
    gradient_data_fit,
    jacobian_from_system,
)
from cemeit.simulate import Inclusion, Phantom


def _random_sigma(mesh, rng, rep="element"):
    n = mesh.n_elements if rep == "element" else mesh.n_nodes
    return Conductivity(rng.uniform(0.8, 2.5, n), rep)


@pytest.mark.parametrize("rep", ["element", "node"])
def test_jacobian_finite_differences(small_mesh, electrodes, patterns, rng, rep):
    sigma = _random_sigma(small_mesh, rng, rep)
    J = compute_jacobian(small_mesh, sigma, electrodes, patterns).matrix
    h = 1e-6
    n = len(sigma.values)
    for m in rng.choice(n, 8, replace=False):
        up, dn = sigma.values.copy(), sigma.values.copy()
        up[m] += h
        dn[m] -= h
        fd = (forward_voltages(small_mesh, sigma.with_values(up), electrodes, patterns)
              - forward_voltages(small_mesh, sigma.with_values(dn), electrodes, patterns)) / (2 * h)
        assert np.linalg.norm(J[:, m] - fd) <= 1e-5 * np.linalg.norm(fd)


def test_jacobian_scales_with_current(small_mesh, electrodes, patterns, rng):
    sigma = _random_sigma(small_mesh, rng)
    J1 = compute_jacobian(small_mesh, sigma, electrodes, patterns).matrix
    J3 = compute_jacobian(small_mesh, sigma, electrodes, patterns.scaled(3.0)).matrix
    np.testing.assert_allclose(J3, 3.0 * J1, rtol=1e-10, atol=1e-14)


def test_jacobian_rotation_equivariance(coarse_mesh, electrodes, patterns):
    m = coarse_mesh
    L = 16
    J = compute_jacobian(m, Conductivity.constant(m, 1.31), electrodes, patterns).matrix
    J = J.reshape(L, L, m.n_elements)
    a = 2 * math.pi / L
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    rc = m.centroids @ R.T
    key = {tuple(np.round(c, 8)): i for i, c in enumerate(m.centroids)}
    perm = np.array([key[tuple(np.round(c, 8))] for c in rc])
    # element e rotated lands on perm[e]; pattern k and electrode l shift by one
    scale = np.abs(J).max()
    for k in range(L):
        rotated = J[(k + 1) % L][np.roll(np.arange(L), -1)][:, perm]
        np.testing.assert_allclose(rotated, J[k], atol=1e-8 * scale)


def test_adjoint_zero_and_self_adjoint(small_mesh, electrodes, patterns, rng):
    sigma = _random_sigma(small_mesh, rng)
    s = assemble_cem_system(small_mesh, sigma, electrodes)
    z = adjoint_solve(s, np.zeros((16, 16)))
    assert not np.any(z.potentials)
    r = rng.standard_normal((16, 16))
    r -= r.mean(axis=1, keepdims=True)
    adj = adjoint_solve(s, r)
    fwd = solve_forward(s, patterns)
    lhs = np.sum(adj.voltages * patterns.currents, axis=1)
    rhs = np.sum(r * fwd.voltages, axis=1)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12 * np.abs(rhs).max())
    np.testing.assert_allclose(adj.voltages.sum(axis=1), 0, atol=1e-12)


def test_adjoint_of_currents_reproduces_forward(small_mesh, electrodes, patterns, rng):
    s = assemble_cem_system(small_mesh, _random_sigma(small_mesh, rng), electrodes)
    adj = adjoint_solve(s, patterns.currents)
    fwd = solve_forward(s, patterns)
    np.testing.assert_allclose(adj.potentials, fwd.potentials, atol=1e-12)


def test_gradient_matches_jt_r(small_mesh, electrodes, patterns, rng):
    sigma = _random_sigma(small_mesh, rng)
    s = assemble_cem_system(small_mesh, sigma, electrodes)
    data = rng.standard_normal(256) * 0.1
    J, fwd = jacobian_from_system(s, patterns)
    r = fwd.stacked - data
    g = coefficient_gradient(fwd, adjoint_solve(s, r.reshape(16, 16)), small_mesh)
    ref = J.matrix.T @ r
    np.testing.assert_allclose(g, ref, rtol=1e-9, atol=1e-9 * np.abs(ref).max())
    ge = gradient_data_fit(fwd, adjoint_solve(s, r.reshape(16, 16)), small_mesh)
    np.testing.assert_allclose(ge * small_mesh.element_areas, g, rtol=1e-12)


def test_gradient_directional_fd(small_mesh, electrodes, patterns, rng):
    sigma = _random_sigma(small_mesh, rng, "node")
    data = forward_voltages(small_mesh, Conductivity.constant(small_mesh, 1.3, "node"),
                            electrodes, patterns)
    s = assemble_cem_system(small_mesh, sigma, electrodes)
    psi, fwd = data_misfit(s, patterns, data)
    adj = adjoint_solve(s, (fwd.stacked - data).reshape(16, 16))
    g = coefficient_gradient(fwd, adj, small_mesh, "node")
    h = 1e-5
    for _ in range(5):
        d = rng.standard_normal(small_mesh.n_nodes)
        f = [data_misfit(assemble_cem_system(small_mesh, sigma.with_values(sigma.values + t * d),
                                             electrodes), patterns, data)[0] for t in (h, -h)]
        fd = (f[0] - f[1]) / (2 * h)
        assert abs(g @ d - fd) <= 1e-5 * abs(fd)


def test_zero_residual_zero_gradient(small_mesh, electrodes, patterns):
    s = assemble_cem_system(small_mesh, Conductivity.constant(small_mesh, 1.0), electrodes)
    fwd = solve_forward(s, patterns)
    g = coefficient_gradient(fwd, adjoint_solve(s, np.zeros((16, 16))), small_mesh)
    assert not np.any(g)


def test_gradient_sign_inside_inclusion(mid_mesh, electrodes, patterns):
    inc = Inclusion("ellipse", dict(cx=0.2, cy=0.1, a=0.3, b=0.3, angle=0.0), 2.5)
    truth = Phantom([inc])
    data = forward_voltages(mid_mesh, truth.render(mid_mesh), electrodes, patterns)
    s = assemble_cem_system(mid_mesh, Conductivity.constant(mid_mesh, 1.31), electrodes)
    fwd = solve_forward(s, patterns)
    g = coefficient_gradient(fwd, adjoint_solve(s, (fwd.stacked - data).reshape(16, 16)), mid_mesh)
    inside = inc.contains(mid_mesh.centroids)
    assert g[inside].sum() < 0


def test_gradient_dimension_mismatch(small_mesh, electrodes, patterns):
    s = assemble_cem_system(small_mesh, Conductivity.constant(small_mesh, 1.0), electrodes)
    fwd = solve_forward(s, patterns)
    adj = adjoint_solve(s, np.ones((2, 16)) * np.arange(16))
    with pytest.raises(DimensionError):
        coefficient_gradient(fwd, adj, small_mesh)

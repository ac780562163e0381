"""Complete electrode model: assembly and forward solves.

The discrete system couples nodal potentials ``alpha`` (P1), electrode
voltages ``U`` and one Lagrange multiplier enforcing ``sum(U) = 0``::

    [ A    B   0 ] [alpha ]   [0]
    [ B^T  D   1 ] [  U   ] = [I]
    [ 0    1^T 0 ] [lambda]   [0]

For mean-free ``I`` the multiplier vanishes at the solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import DimensionError, NumericalError, ValidationError
from .mesh import Mesh

DEFAULT_BOUNDS = (1e-3, 10.0)
SOLVE_RTOL = 1e-10


@dataclass(frozen=True)
class Conductivity:
    """Scalar conductivity on a mesh.

    ``representation`` is ``"element"`` (piecewise constant) or ``"node"``
    (piecewise linear).
    """

    values: np.ndarray
    representation: str = "element"
    bounds: tuple[float, float] = DEFAULT_BOUNDS

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.representation not in ("element", "node"):
            raise ValidationError(f"unknown representation {self.representation!r}")

    @classmethod
    def constant(cls, mesh: Mesh, value: float, representation="element", bounds=DEFAULT_BOUNDS):
        n = mesh.n_elements if representation == "element" else mesh.n_nodes
        return cls(np.full(n, float(value)), representation, bounds)

    def check_admissible(self) -> None:
        c0, c1 = self.bounds
        if not c0 > 0:
            raise ValidationError(f"lower bound must be positive, got {c0}")
        v = self.values
        if not np.all(np.isfinite(v)):
            raise ValidationError("conductivity has non-finite values")
        if v.min() < c0 or v.max() > c1:
            raise ValidationError(
                f"conductivity range [{v.min():.4g}, {v.max():.4g}] outside [{c0}, {c1}]"
            )

    def check_mesh(self, mesh: Mesh) -> None:
        n = mesh.n_elements if self.representation == "element" else mesh.n_nodes
        if len(self.values) != n:
            raise DimensionError(
                f"{self.representation} conductivity has {len(self.values)} values, mesh needs {n}"
            )

    def element_values(self, mesh: Mesh) -> np.ndarray:
        """Effective per-element coefficient (exact for P1 with P1 potentials)."""
        self.check_mesh(mesh)
        if self.representation == "element":
            return self.values
        return mesh.node_to_element_average @ self.values

    def with_values(self, values) -> "Conductivity":
        return replace(self, values=np.asarray(values, dtype=float))


@dataclass(frozen=True)
class ElectrodeModel:
    contact_impedances: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.contact_impedances, dtype=float)
        object.__setattr__(self, "contact_impedances", z)
        if z.ndim != 1 or len(z) < 2:
            raise ValidationError("need a vector of at least two contact impedances")
        if np.any(z <= 0):
            raise ValidationError("contact impedances must be positive")

    @property
    def L(self) -> int:
        return len(self.contact_impedances)

    @classmethod
    def uniform(cls, n_electrodes: int, z: float = 1e-2) -> "ElectrodeModel":
        return cls(np.full(n_electrodes, float(z)))


@dataclass(frozen=True)
class CurrentPatterns:
    """K injection patterns over L electrodes, one per row."""

    currents: np.ndarray
    amplitude: float = 1.0
    kind: str = "custom"

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.currents, dtype=float))
        object.__setattr__(self, "currents", c)
        if np.any(np.abs(c.sum(axis=1)) > 1e-12 * max(1.0, np.abs(c).max())):
            raise ValidationError("current patterns must be mean-free")

    @property
    def K(self) -> int:
        return self.currents.shape[0]

    @property
    def L(self) -> int:
        return self.currents.shape[1]

    def scaled(self, c: float) -> "CurrentPatterns":
        return CurrentPatterns(self.currents * c, self.amplitude * c, self.kind)


def adjacent_patterns(L: int, amplitude: float = 1.0) -> CurrentPatterns:
    """+amplitude on electrode k, -amplitude on electrode k+1 (cyclic)."""
    if L < 2:
        raise ValidationError("need at least two electrodes")
    c = np.zeros((L, L))
    k = np.arange(L)
    c[k, k] += amplitude
    c[k, (k + 1) % L] -= amplitude
    return CurrentPatterns(c, float(amplitude), "adjacent")


def trig_patterns(L: int, amplitude: float = 1.0) -> CurrentPatterns:
    """L-1 trigonometric patterns; rows are cos/sin harmonics of the electrode angle."""
    if L < 4 or L % 2:
        raise ValidationError("trigonometric patterns need an even L >= 4")
    theta = 2.0 * np.pi * np.arange(L) / L
    rows = []
    for k in range(1, L):
        if k % 2:
            rows.append(np.cos((k + 1) * theta / 2))
        else:
            rows.append(np.sin(k * theta / 2))
    c = np.array(rows)
    c -= c.mean(axis=1, keepdims=True)
    c[np.abs(c) < 1e-15] = 0.0
    return CurrentPatterns(amplitude * c, float(amplitude), "trigonometric")


@dataclass
class ForwardSolution:
    potentials: np.ndarray  # (K, N)
    voltages: np.ndarray  # (K, L)

    @property
    def stacked(self) -> np.ndarray:
        return self.voltages.ravel()


@dataclass
class MeasurementFrame:
    """Stacked electrode voltages, pattern-major (``K*L`` values)."""

    voltages: np.ndarray
    K: int
    L: int
    delta: float = 0.0
    pattern_kind: str = "adjacent"
    amplitude: float = 1.0
    seed: int | None = None
    mesh_tag: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.voltages = np.asarray(self.voltages, dtype=float).ravel()
        if len(self.voltages) != self.K * self.L:
            raise DimensionError(f"frame has {len(self.voltages)} values, expected K*L")

    @property
    def matrix(self) -> np.ndarray:
        return self.voltages.reshape(self.K, self.L)

    @classmethod
    def from_solution(cls, sol: ForwardSolution, patterns: CurrentPatterns, mesh_tag=""):
        K, L = sol.voltages.shape
        return cls(sol.voltages.ravel().copy(), K, L, 0.0, patterns.kind, patterns.amplitude,
                   None, mesh_tag)


def add_noise(clean: MeasurementFrame, delta: float, seed: int | None = None) -> MeasurementFrame:
    """U + delta * mean(|U|) * eps with eps ~ N(0, I) drawn from ``seed``."""
    if delta < 0:
        raise ValidationError("noise level must be non-negative")
    u = clean.voltages
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(u.shape)
    noisy = u + delta * np.mean(np.abs(u)) * eps if delta > 0 else u.copy()
    return replace(clean, voltages=noisy, delta=float(delta), seed=seed,
                   extra=dict(clean.extra))


# ---------------------------------------------------------------------------
# assembly


class _ElectrodeBlocks:
    """sigma-independent parts of the CEM system for one mesh/electrode pair."""

    def __init__(self, mesh: Mesh, electrodes: ElectrodeModel):
        if mesh.n_electrodes != electrodes.L:
            raise DimensionError(
                f"mesh has {mesh.n_electrodes} electrodes, model has {electrodes.L}"
            )
        n, L = mesh.n_nodes, electrodes.L
        z = electrodes.contact_impedances
        h = mesh.boundary_edge_lengths
        rows, cols, vals = [], [], []
        brow, bcol, bval = [], [], []
        for ell, group in enumerate(mesh.electrode_edges):
            for e in group:
                i, j = mesh.boundary_edges[e]
                w = h[e] / z[ell]
                # exact P1 edge mass: h/6 [[2,1],[1,2]]
                rows += [i, i, j, j]
                cols += [i, j, i, j]
                vals += [w / 3, w / 6, w / 6, w / 3]
                brow += [i, j]
                bcol += [ell, ell]
                bval += [-w / 2, -w / 2]
        self.electrode_mass = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        self.B = sparse.csr_matrix((bval, (brow, bcol)), shape=(n, L))
        self.D = sparse.diags(mesh.electrode_lengths / z).tocsr()
        self.n, self.L = n, L


def _blocks(mesh: Mesh, electrodes: ElectrodeModel) -> _ElectrodeBlocks:
    cache = mesh.__dict__.setdefault("_cem_blocks", {})
    key = electrodes.contact_impedances.tobytes()
    if key not in cache:
        cache[key] = _ElectrodeBlocks(mesh, electrodes)
    return cache[key]


def stiffness(mesh: Mesh, coeff: np.ndarray) -> sparse.csr_matrix:
    """sum_T coeff_T * K_T for a per-element coefficient."""
    local = coeff[:, None, None] * mesh.local_stiffness
    return mesh._assemble(local)


@dataclass
class CemSystem:
    """Assembled and factorized CEM system (immutable after construction)."""

    mesh: Mesh
    electrodes: ElectrodeModel
    sigma: Conductivity
    A: sparse.csr_matrix
    B: sparse.csr_matrix
    Dg: sparse.csr_matrix
    matrix: sparse.csc_matrix
    _lu: object = None

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def lu(self):
        if self._lu is None:
            try:
                self._lu = splu(self.matrix, permc_spec="MMD_AT_PLUS_A")
            except RuntimeError as exc:  # singular factor
                raise NumericalError(f"CEM factorization failed: {exc}") from exc
        return self._lu

    def solve_rhs(self, rhs: np.ndarray) -> np.ndarray:
        """Solve with the full block matrix; columns of ``rhs`` are independent."""
        rhs = np.asarray(rhs, dtype=float)
        x = self.lu.solve(rhs)
        res = rhs - self.matrix @ x
        bn = np.linalg.norm(rhs, axis=0)
        rel = np.linalg.norm(res, axis=0) / np.where(bn > 0, bn, 1.0)
        if np.any(rel > SOLVE_RTOL):
            x = x + self.lu.solve(res)
            res = rhs - self.matrix @ x
            rel = np.linalg.norm(res, axis=0) / np.where(bn > 0, bn, 1.0)
            if np.any(rel > SOLVE_RTOL):
                raise NumericalError(
                    f"CEM solve relative residual {rel.max():.2e} exceeds {SOLVE_RTOL}",
                    residual=float(rel.max()),
                )
        return x

    def solve_currents(self, currents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nodal potentials (K, N) and electrode voltages (K, L) for current rows."""
        currents = np.atleast_2d(currents)
        n, L = self.mesh.n_nodes, self.electrodes.L
        rhs = np.zeros((self.size, currents.shape[0]))
        rhs[n : n + L] = currents.T
        x = self.solve_rhs(rhs)
        return x[:n].T.copy(), x[n : n + L].T.copy()


def assemble_cem_system(mesh: Mesh, sigma: Conductivity, electrodes: ElectrodeModel) -> CemSystem:
    """Assemble A, B, Dg and the grounded block matrix for ``sigma``."""
    sigma.check_mesh(mesh)
    sigma.check_admissible()
    blocks = _blocks(mesh, electrodes)
    if np.any(mesh.signed_areas <= 0):
        raise NumericalError("degenerate element in mesh")
    A = (stiffness(mesh, sigma.element_values(mesh)) + blocks.electrode_mass).tocsr()
    ones = sparse.csr_matrix(np.ones((1, blocks.L)))
    full = sparse.bmat(
        [
            [A, blocks.B, None],
            [blocks.B.T, blocks.D, ones.T],
            [None, ones, None],
        ],
        format="csc",
    )
    return CemSystem(mesh, electrodes, sigma, A, blocks.B, blocks.D, full)


def solve_forward(system: CemSystem, patterns: CurrentPatterns) -> ForwardSolution:
    """Potentials and grounded electrode voltages for every pattern."""
    if patterns.L != system.electrodes.L:
        raise DimensionError(f"patterns have {patterns.L} electrodes, system {system.electrodes.L}")
    c = patterns.currents
    if np.any(np.abs(c.sum(axis=1)) > 1e-12 * max(1.0, np.abs(c).max())):
        raise ValidationError("current patterns must be mean-free")
    if not np.any(c):
        return ForwardSolution(np.zeros((patterns.K, system.mesh.n_nodes)),
                               np.zeros((patterns.K, patterns.L)))
    u, U = system.solve_currents(c)
    return ForwardSolution(u, U)


def forward_voltages(mesh, sigma, electrodes, patterns) -> np.ndarray:
    """Convenience: stacked ``F(sigma) I`` (length K*L)."""
    return solve_forward(assemble_cem_system(mesh, sigma, electrodes), patterns).stacked

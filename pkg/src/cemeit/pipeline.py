"""Method registry, tuned defaults and the shared per-dataset context.

Every reconstruction method is addressed by name and returns a
:class:`ReconResult`; hyperparameters are plain dictionaries validated
against the method's config dataclass.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .dsm import dsm_index, lift_cauchy_difference
from .errors import ConfigError
from .fem import (
    Conductivity,
    CurrentPatterns,
    ElectrodeModel,
    MeasurementFrame,
    adjacent_patterns,
    assemble_cem_system,
    solve_forward,
    trig_patterns,
)
from .gauss_newton import GnConfig, gn_tv_reconstruct
from .jacobian import jacobian_from_system
from .levelset import LevelSetConfig, levelset_reconstruct
from .linear import (
    PRIOR_A,
    PRIOR_B,
    LinearReconstructor,
    NoiseModel,
    build_linear_reconstructor,
    build_smoothness_prior,
)
from .mesh import Mesh
from .result import ReconResult
from .simulate import BACKGROUND, COARSE_MESH, DatasetManifest
from .sparsity import SparsityConfig, sparsity_reconstruct

METHODS = ("lin-rec", "gn-tv", "l1-sparsity", "level-set", "dsm-index")
# reference reconstruction for score tables, not a reconstruction method
BASELINE_METHOD = "constant"


@dataclass
class LinRecConfig:
    alpha: float = 2.0  # minimizer of the mean relative L1 error on validation frames
    prior_a: float = PRIOR_A
    prior_b: float = PRIOR_B
    clip: bool = True


@dataclass
class DsmConfig:
    aggregate: str = "max"
    sigma0: float = 1.0


@dataclass
class ConstantConfig:
    value: float = BACKGROUND


_CONFIGS = {
    "lin-rec": LinRecConfig,
    "gn-tv": GnConfig,
    "l1-sparsity": SparsityConfig,
    "level-set": LevelSetConfig,
    "dsm-index": DsmConfig,
    BASELINE_METHOD: ConstantConfig,
}


def check_method(method: str, allow_baseline: bool = True) -> str:
    names = METHODS + ((BASELINE_METHOD,) if allow_baseline else ())
    if method not in names:
        raise ConfigError(f"unknown method {method!r}; choose one of {', '.join(names)}")
    return method


def make_config(method: str, params: dict | None = None):
    """Config dataclass of ``method`` with ``params`` overriding the defaults."""
    cls = _CONFIGS[check_method(method)]
    params = dict(params or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(params) - known)
    if unknown:
        raise ConfigError(f"{method}: unknown parameter(s) {', '.join(unknown)}; "
                          f"known: {', '.join(sorted(known))}")
    for key in ("bounds",):
        if key in params and params[key] is not None:
            params[key] = tuple(params[key])
    try:
        return cls(**params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{method}: {exc}") from exc


def default_params(method: str) -> dict:
    return asdict(make_config(method))


@dataclass(eq=False)
class ReconContext:
    """Everything the reconstructors share for one data source.

    ``reference`` is the noiseless background frame of the data source
    (difference-data methods subtract it); without one, the model
    prediction ``F(sigma0) I`` on ``mesh`` is used instead.
    """

    mesh: Mesh
    electrodes: ElectrodeModel
    patterns: CurrentPatterns
    reference: MeasurementFrame | None = None
    delta: float = 0.005
    background: float = BACKGROUND
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dataset(cls, root) -> "ReconContext":
        root = Path(root)
        man = DatasetManifest.load(root)
        mesh = Mesh.load(root / "mesh_coarse.json")
        p = man.patterns
        electrodes = ElectrodeModel.uniform(int(p["L"]), float(p["contact_impedance"]))
        patterns = _patterns(p["kind"], int(p["L"]), float(p["amplitude"]))
        ref_path = root / "baseline_dense.f64"
        reference = io.read_frame(ref_path) if ref_path.exists() else None
        return cls(mesh, electrodes, patterns, reference, float(man.delta))

    @classmethod
    def default(cls, n_electrodes: int = 16, coverage: float = 0.45, contact_impedance=1e-2,
                pattern_kind="adjacent", amplitude=1.0, delta=0.005) -> "ReconContext":
        from .mesh import build_disk_mesh

        mesh = build_disk_mesh(1.0, n_electrodes, coverage, **COARSE_MESH)
        return cls(mesh, ElectrodeModel.uniform(n_electrodes, contact_impedance),
                   _patterns(pattern_kind, n_electrodes, amplitude), None, delta)

    def sigma0(self, bounds=(1e-3, 10.0)) -> Conductivity:
        return Conductivity.constant(self.mesh, self.background, bounds=bounds)

    def _background_jacobian(self):
        if "J0" not in self._cache:
            system = assemble_cem_system(self.mesh, self.sigma0(), self.electrodes)
            self._cache["J0"] = jacobian_from_system(system, self.patterns)
        return self._cache["J0"]

    @property
    def model_baseline(self) -> np.ndarray:
        """``F(sigma0) I`` on the reconstruction mesh."""
        return self._background_jacobian()[1].stacked

    @property
    def reference_frame(self) -> MeasurementFrame:
        if self.reference is not None:
            return self.reference
        return MeasurementFrame(self.model_baseline, self.patterns.K, self.patterns.L, 0.0,
                                self.patterns.kind, self.patterns.amplitude)

    def linear(self, cfg: LinRecConfig | None = None) -> LinearReconstructor:
        """Lin-Rec reconstruction matrix, built once per hyperparameter set."""
        cfg = cfg or LinRecConfig()
        key = ("lin", cfg.alpha, cfg.prior_a, cfg.prior_b)
        if key not in self._cache:
            pkey = ("prior", cfg.prior_a, cfg.prior_b)
            if pkey not in self._cache:
                self._cache[pkey] = build_smoothness_prior(self.mesh, cfg.prior_a, cfg.prior_b)
            J0, fwd = self._background_jacobian()
            noise = NoiseModel.from_level(fwd.stacked, self.delta)
            t0 = time.perf_counter()
            rec = build_linear_reconstructor(J0, fwd.stacked, cfg.alpha, noise, self._cache[pkey])
            rec.meta["build_time"] = time.perf_counter() - t0
            self._cache[key] = rec
        return self._cache[key]


def _patterns(kind: str, L: int, amplitude: float) -> CurrentPatterns:
    if kind == "adjacent":
        return adjacent_patterns(L, amplitude)
    if kind == "trigonometric":
        return trig_patterns(L, amplitude)
    raise ConfigError(f"unknown current pattern kind {kind!r}")


def reconstruct(method: str, frame: MeasurementFrame, ctx: ReconContext,
                params: dict | None = None) -> ReconResult:
    """Run one method on one frame."""
    cfg = make_config(method, params)
    t0 = time.perf_counter()
    if method == "lin-rec":
        lin = ctx.linear(cfg)
        sigma = lin.reconstruct(frame, clip=cfg.clip)
        return ReconResult(sigma, method, [], time.perf_counter() - t0,
                           {"alpha": cfg.alpha, "build_time": lin.meta.get("build_time")})
    if method == "gn-tv":
        return gn_tv_reconstruct(frame, cfg, ctx.mesh, ctx.electrodes, ctx.patterns)
    if method == "l1-sparsity":
        return sparsity_reconstruct(frame, cfg, ctx.mesh, ctx.electrodes, ctx.patterns)
    if method == "level-set":
        return levelset_reconstruct(frame, ctx.mesh, ctx.electrodes, ctx.patterns,
                                    ctx.reference_frame, cfg, linear=ctx.linear())
    if method == "dsm-index":
        diff = (frame.voltages - ctx.reference_frame.voltages).reshape(frame.K, frame.L)
        s0 = Conductivity.constant(ctx.mesh, cfg.sigma0)
        lifted = lift_cauchy_difference(ctx.mesh, ctx.electrodes, s0, diff)
        index = dsm_index(lifted, ctx.mesh, cfg.aggregate)
        # an index map in [0, 1], not a conductivity
        return ReconResult(Conductivity(index, "node", (0.0, 1.0)), method, [],
                           time.perf_counter() - t0, {"kind": "index"})
    sigma = Conductivity.constant(ctx.mesh, cfg.value)
    return ReconResult(sigma, method, [], time.perf_counter() - t0, {})


def save_params(path, method: str, params: dict | None) -> None:
    cfg = make_config(method, params)
    io.write_json(path, {"method": method, "params": asdict(cfg)})


def load_params(path) -> tuple[str, dict]:
    d = json.loads(Path(path).read_text())
    return d["method"], d["params"]

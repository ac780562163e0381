"""Phantoms, simulated measurements and dataset generation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon

from . import io
from .errors import GeometryError
from .fem import (
    DEFAULT_BOUNDS,
    Conductivity,
    CurrentPatterns,
    ElectrodeModel,
    MeasurementFrame,
    adjacent_patterns,
    add_noise,
    assemble_cem_system,
    solve_forward,
)
from .mesh import Mesh, build_disk_mesh

log = logging.getLogger(__name__)

BACKGROUND = 1.31
LOW_RANGE = (0.01, 0.3)
HIGH_RANGE = (2.0, 3.0)
MARGIN = 0.02  # fraction of the radius kept free at the boundary

COARSE_MESH = dict(target_elements=5248, edges_per_electrode=4)
DENSE_MESH = dict(target_elements=8072, edges_per_electrode=5)

RESISTIVE, BACKGROUND_CLASS, CONDUCTIVE = 0, 1, 2


@dataclass
class Inclusion:
    kind: str  # ellipse, rectangle, triangle, L_shape
    params: dict
    value: float

    def polygon(self, n: int = 256) -> Polygon:
        p = self.params
        if self.kind == "ellipse":
            t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
            x = p["a"] * np.cos(t)
            y = p["b"] * np.sin(t)
            c, s = math.cos(p["angle"]), math.sin(p["angle"])
            pts = np.column_stack([p["cx"] + c * x - s * y, p["cy"] + s * x + c * y])
        else:
            pts = np.asarray(p["vertices"], dtype=float)
        return Polygon(pts)

    def contains(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        if self.kind == "ellipse":
            p = self.params
            c, s = math.cos(p["angle"]), math.sin(p["angle"])
            dx = xy[:, 0] - p["cx"]
            dy = xy[:, 1] - p["cy"]
            u = c * dx + s * dy
            v = -s * dx + c * dy
            return (u / p["a"]) ** 2 + (v / p["b"]) ** 2 <= 1.0
        return shapely.contains_xy(self.polygon(), xy[:, 0], xy[:, 1])

    def area(self) -> float:
        if self.kind == "ellipse":
            return math.pi * self.params["a"] * self.params["b"]
        return float(self.polygon().area)


@dataclass
class Phantom:
    inclusions: list
    background: float = BACKGROUND
    bounds: tuple = DEFAULT_BOUNDS
    flags: list = field(default_factory=list)

    def element_values(self, mesh: Mesh) -> np.ndarray:
        vals = np.full(mesh.n_elements, float(self.background))
        for inc in self.inclusions:
            vals[inc.contains(mesh.centroids)] = inc.value
        return vals

    def render(self, mesh: Mesh) -> Conductivity:
        return Conductivity(self.element_values(mesh), "element", self.bounds)

    def labels(self, mesh: Mesh) -> np.ndarray:
        """3-class element labels: 0 resistive, 1 background, 2 conductive."""
        lab = np.full(mesh.n_elements, BACKGROUND_CLASS)
        for inc in self.inclusions:
            cls = CONDUCTIVE if inc.value > self.background else RESISTIVE
            lab[inc.contains(mesh.centroids)] = cls
        return lab

    def to_dict(self) -> dict:
        return {
            "background": self.background,
            "bounds": list(self.bounds),
            "flags": list(self.flags),
            "inclusions": [asdict(i) for i in self.inclusions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Phantom":
        return cls(
            [Inclusion(i["kind"], i["params"], i["value"]) for i in d["inclusions"]],
            d["background"],
            tuple(d.get("bounds", DEFAULT_BOUNDS)),
            list(d.get("flags", [])),
        )


def _inclusion_value(rng: np.random.Generator) -> float:
    lo, hi = LOW_RANGE if rng.random() < 0.5 else HIGH_RANGE
    return float(rng.uniform(lo, hi))


def _admissible(poly: Polygon, others: list, radius: float = 1.0) -> bool:
    pts = np.asarray(poly.exterior.coords)
    if np.max(np.hypot(pts[:, 0], pts[:, 1])) > (1.0 - MARGIN) * radius:
        return False
    return all(not poly.intersects(o) for o in others)


def _place(rng, n_inc: int, make, max_tries: int = 500):
    incs, polys = [], []
    tries = 0
    while len(incs) < n_inc:
        tries += 1
        if tries > max_tries:
            return None
        inc = make(rng, len(incs))
        poly = inc.polygon()
        if _admissible(poly, polys):
            incs.append(inc)
            polys.append(poly)
    return incs


ELLIPSE_CENTER_RADIUS = 0.75
ELLIPSE_AXES = (0.15, 0.5)


def _random_ellipse(rng: np.random.Generator, _i: int = 0) -> Inclusion:
    rho = ELLIPSE_CENTER_RADIUS * math.sqrt(rng.random())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    a, b = rng.uniform(*ELLIPSE_AXES, size=2)
    params = dict(cx=rho * math.cos(phi), cy=rho * math.sin(phi), a=float(a), b=float(b),
                  angle=float(rng.uniform(0.0, math.pi)))
    return Inclusion("ellipse", params, _inclusion_value(rng))


def _with_retries(seed: int, build):
    flags = []
    for attempt in range(100):
        ss = np.random.SeedSequence([int(seed), attempt])
        rng = np.random.default_rng(ss)
        incs = build(rng)
        if incs is not None:
            return incs, flags
        flags.append(f"rejection budget exhausted (attempt {attempt})")
    raise GeometryError(f"could not place inclusions for seed {seed}")


def sample_ellipse_phantom(seed: int) -> Phantom:
    """1-3 non-overlapping ellipses on the 1.31 background, deterministic per seed."""

    def build(rng):
        n = int(rng.integers(1, 4))
        return _place(rng, n, _random_ellipse)

    incs, flags = _with_retries(seed, build)
    return Phantom(incs, BACKGROUND, flags=flags)


def _rotate(pts, angle, center):
    c, s = math.cos(angle), math.sin(angle)
    pts = np.asarray(pts, dtype=float)
    return pts @ np.array([[c, s], [-s, c]]) + np.asarray(center)


def _random_center(rng, rmax=0.65):
    rho = rmax * math.sqrt(rng.random())
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return (rho * math.cos(phi), rho * math.sin(phi))


def _random_rectangle(rng, _i=0) -> Inclusion:
    w, h = rng.uniform(0.35, 0.9), rng.uniform(0.25, 0.6)
    pts = np.array([[-w, -h], [w, -h], [w, h], [-w, h]]) / 2.0
    verts = _rotate(pts, rng.uniform(0, math.pi), _random_center(rng))
    return Inclusion("rectangle", {"vertices": verts.tolist()}, _inclusion_value(rng))


def _random_triangle(rng, _i=0) -> Inclusion:
    size = rng.uniform(0.35, 0.6)
    angles = np.array([0.0, 2 * math.pi / 3, 4 * math.pi / 3]) + rng.uniform(-0.3, 0.3, 3)
    pts = size * np.column_stack([np.cos(angles), np.sin(angles)])
    verts = _rotate(pts, rng.uniform(0, 2 * math.pi), _random_center(rng))
    return Inclusion("triangle", {"vertices": verts.tolist()}, _inclusion_value(rng))


def _random_l_shape(rng, _i=0) -> Inclusion:
    s = rng.uniform(0.5, 0.85)  # outer side
    t = rng.uniform(0.4, 0.55) * s  # arm thickness
    pts = np.array([[0, 0], [s, 0], [s, t], [t, t], [t, s], [0, s]]) - np.array([s, s]) / 3
    verts = _rotate(pts, rng.uniform(0, 2 * math.pi), _random_center(rng))
    return Inclusion("L_shape", {"vertices": verts.tolist()}, _inclusion_value(rng))


_OOD_MAKERS = {
    "rectangle": _random_rectangle,
    "triangle": _random_triangle,
    "L_shape": _random_l_shape,
}
OOD_KINDS = ("rectangle", "triangle", "L_shape", "mixed")


def ood_phantom(kind: str, seed: int) -> Phantom:
    """Out-of-distribution phantom with polygonal inclusions.

    ``kind`` is one of rectangle, triangle, L_shape (1-2 inclusions of that
    shape) or mixed (2-3 inclusions of distinct shapes).
    """
    if kind not in OOD_KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {OOD_KINDS}")

    def build(rng):
        if kind == "mixed":
            n = int(rng.integers(2, 4))
            kinds = list(rng.permutation(list(_OOD_MAKERS))[:n])
            return _place(rng, n, lambda r, i: _OOD_MAKERS[kinds[i]](r))
        n = int(rng.integers(1, 3))
        return _place(rng, n, _OOD_MAKERS[kind])

    incs, flags = _with_retries(seed, build)
    return Phantom(incs, BACKGROUND, flags=flags)


def simulate_measurements(
    phantom: Phantom,
    dense_mesh: Mesh,
    patterns: CurrentPatterns,
    delta: float = 0.005,
    seed: int | None = None,
    electrodes: ElectrodeModel | None = None,
) -> MeasurementFrame:
    """Forward solve on the simulation mesh followed by relative Gaussian noise."""
    if electrodes is None:
        electrodes = ElectrodeModel.uniform(dense_mesh.n_electrodes)
    system = assemble_cem_system(dense_mesh, phantom.render(dense_mesh), electrodes)
    sol = solve_forward(system, patterns)
    clean = MeasurementFrame.from_solution(sol, patterns, dense_mesh.tag)
    frame = add_noise(clean, delta, seed)
    u = clean.voltages
    noise = frame.voltages - u
    frame.extra["snr_db"] = (
        float(10 * np.log10(np.sum(u**2) / np.sum(noise**2))) if delta > 0 else float("inf")
    )
    return frame


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    output: str = "data/ellipses"
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 100
    master_seed: int = 20250101
    delta: float = 0.005
    amplitude: float = 1.0
    contact_impedance: float = 1e-2
    n_electrodes: int = 16
    coverage: float = 0.45
    kind: str = "ellipses"  # or an OOD kind or "ood" (all kinds cycled)


@dataclass
class DatasetManifest:
    counts: dict
    seeds: dict
    delta: float
    meshes: dict
    patterns: dict
    files: dict
    snr_db: dict
    config: dict

    def to_dict(self):
        return asdict(self)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        p = Path(path)
        if p.is_dir():
            p = p / "manifest.json"
        return cls(**json.loads(p.read_text()))


def default_meshes(n_electrodes=16, coverage=0.45) -> tuple[Mesh, Mesh]:
    coarse = build_disk_mesh(1.0, n_electrodes, coverage, **COARSE_MESH)
    dense = build_disk_mesh(1.0, n_electrodes, coverage, **DENSE_MESH)
    return coarse, dense


def _sample_seed(master: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([master, sum(map(ord, split)), index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate_dataset(cfg: DatasetConfig, coarse: Mesh | None = None, dense: Mesh | None = None):
    """Write phantoms (coarse-mesh element fields), noisy frames and a manifest."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    if coarse is None or dense is None:
        coarse, dense = default_meshes(cfg.n_electrodes, cfg.coverage)
    electrodes = ElectrodeModel.uniform(cfg.n_electrodes, cfg.contact_impedance)
    patterns = adjacent_patterns(cfg.n_electrodes, cfg.amplitude)
    coarse.save(out / "mesh_coarse.json")
    dense.save(out / "mesh_dense.json")

    # noiseless background frame, on both meshes
    bg = Phantom([], BACKGROUND)
    base_dense = simulate_measurements(bg, dense, patterns, 0.0, None, electrodes)
    io.write_frame(out / "baseline_dense.f64", base_dense)

    files, seeds, snr = {}, {}, {}
    splits = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    index = 0
    for split, n in splits.items():
        files[split], seeds[split], snr[split] = [], [], []
        for i in range(n):
            seed = _sample_seed(cfg.master_seed, split, i)
            if cfg.kind == "ellipses":
                ph = sample_ellipse_phantom(seed)
            else:
                kind = OOD_KINDS[i % len(OOD_KINDS)] if cfg.kind == "ood" else cfg.kind
                ph = ood_phantom(kind, seed)
            frame = simulate_measurements(ph, dense, patterns, cfg.delta, seed + 1, electrodes)
            name = f"{index:04d}"
            io.write_raw(out / "phantoms" / f"{name}.f64", ph.element_values(coarse),
                         mesh_tag=coarse.tag, split=split, seed=seed)
            (out / "phantoms" / f"{name}.phantom.json").write_text(
                json.dumps(ph.to_dict(), sort_keys=True))
            io.write_frame(out / "frames" / f"{name}.f64", frame)
            files[split].append(name)
            seeds[split].append(seed)
            snr[split].append(frame.extra["snr_db"])
            index += 1
    manifest = DatasetManifest(
        counts=splits,
        seeds=seeds,
        delta=cfg.delta,
        meshes={"coarse": coarse.tag, "dense": dense.tag},
        patterns={"kind": patterns.kind, "K": patterns.K, "L": patterns.L,
                  "amplitude": patterns.amplitude, "contact_impedance": cfg.contact_impedance},
        files=files,
        snr_db={k: (float(np.mean(v)) if v else None) for k, v in snr.items()},
        config=asdict(cfg),
    )
    io.write_json(out / "manifest.json", manifest.to_dict())
    log.info("wrote %d samples to %s", index, out)
    return manifest


def load_sample(root, name: str):
    """(ground-truth coarse element field, phantom, frame) for one sample."""
    root = Path(root)
    gt, _ = io.read_raw(root / "phantoms" / f"{name}.f64")
    ph = Phantom.from_dict(json.loads((root / "phantoms" / f"{name}.phantom.json").read_text()))
    frame = io.read_frame(root / "frames" / f"{name}.f64")
    return gt, ph, frame

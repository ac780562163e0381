"""Command-line entry point: ``simulate``, ``reconstruct``, ``evaluate``, ``report``.

Exit codes: 0 success, 1 missing or partial inputs, 2 configuration error.
Options may come from a TOML or JSON file (``--config``); flags win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import CemError, ConfigError
from .fem import Conductivity
from .metrics import (
    BACKGROUND,
    CLASS_NAMES,
    ScoreReport,
    dice_per_class,
    measurement_error,
    score_reconstruction,
    segment,
    summarize,
)
from .mesh import mesh_to_grid
from .pipeline import (
    BASELINE_METHOD,
    METHODS,
    ReconContext,
    check_method,
    make_config,
    reconstruct,
)
from .simulate import OOD_KINDS, DatasetConfig, DatasetManifest, Phantom, generate_dataset

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger("cemeit")

THREADS_ENV = "CEMEIT_THREADS"
EXIT_OK, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2

PRESETS = {
    "ellipses": dict(kind="ellipses", n_train=2000, n_val=200, n_test=100),
    "ood": dict(kind="ood", n_train=0, n_val=0, n_test=len(OOD_KINDS)),
}
SPLITS = ("train", "val", "test")
IMAGE_RANGE = (0.0, 3.0)  # fixed grey scale for conductivity images
SEG_LEGEND = {"0": "resistive", "1": "background", "2": "conductive", "255": "outside"}


class MissingInputs(CemError):
    """Required input files are absent (exit code 1)."""


@dataclass
class RunConfig:
    command: str
    dataset: str | None = None
    output: str | None = None
    method: str | None = None
    params: dict = field(default_factory=dict)
    seed: int | None = None
    threads: int = 1
    frames: str = "test"
    force: bool = False
    limit: int | None = None
    preset: str | None = None
    n_train: int | None = None
    n_val: int | None = None
    n_test: int | None = None
    delta: float | None = None
    kind: str | None = None
    image_size: int = 128
    recon: str | None = None
    inputs: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_params(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = _parse_value(v.strip())
    return out


def _read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    try:
        if p.suffix == ".toml":
            return tomllib.loads(p.read_text())
        return json.loads(p.read_text())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc


def default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(n, 1)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults, the config file and explicit flags (flags win)."""
    merged: dict = {"threads": default_threads()}
    params: dict = {}
    if getattr(args, "config", None):
        file_cfg = _read_config_file(args.config)
        params.update(file_cfg.pop("params", {}) or {})
        merged.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    flags = {k: v for k, v in vars(args).items()
             if v is not None and k not in ("config", "param", "func", "verbose")}
    merged.update(flags)
    params.update(_parse_params(getattr(args, "param", None)))
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    cfg = RunConfig(**merged)
    cfg.params = params
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    for name in ("dataset", "output", "recon"):
        v = getattr(cfg, name)
        if v is not None:
            setattr(cfg, name, str(Path(v).expanduser().resolve()))
    cfg.inputs = [str(Path(p).expanduser().resolve()) for p in cfg.inputs]
    return cfg


def _setup_run_log(directory: Path, cfg: RunConfig) -> logging.Handler:
    directory.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(directory / f"run_{cfg.command}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)
    log.info("config %s", json.dumps(asdict(cfg), sort_keys=True))
    return handler


def _check_writable(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc}") from exc


# ---------------------------------------------------------------------------
# data sources


@dataclass
class Source:
    """A simulated dataset (manifest) or a real-data folder (CSV + masks)."""

    root: Path
    real: bool

    @classmethod
    def open(cls, root) -> "Source":
        if root is None:
            raise ConfigError("--dataset is required")
        root = Path(root)
        if (root / "manifest.json").is_file():
            return cls(root, False)
        if (root / "frames").is_dir() and any((root / "frames").glob("*.csv")):
            return cls(root, True)
        raise MissingInputs(f"{root}: neither manifest.json nor frames/*.csv found")

    def names(self, split: str) -> list[str]:
        if self.real:
            return sorted(p.stem for p in (self.root / "frames").glob("*.csv"))
        files = DatasetManifest.load(self.root).files
        if split == "all":
            return [n for s in SPLITS for n in files.get(s, [])]
        if split not in files:
            raise ConfigError(f"unknown split {split!r}; choose from {', '.join(SPLITS)} or all")
        return list(files[split])

    def context(self, delta: float | None = None) -> ReconContext:
        if not self.real:
            return ReconContext.from_dataset(self.root)
        ctx = ReconContext.default(delta=0.005 if delta is None else delta)
        ref = self.root / "reference.csv"
        if ref.is_file():
            ctx.reference = io.read_frame_csv(ref)
        return ctx

    def frame(self, name: str):
        if self.real:
            return io.read_frame_csv(self.root / "frames" / f"{name}.csv")
        return io.read_frame(self.root / "frames" / f"{name}.f64")

    def mask(self, name: str) -> np.ndarray | None:
        p = self.root / "masks" / f"{name}.pgm"
        if not p.is_file():
            return None
        m = io.read_pgm(p)
        if m.max() > 2:
            m = np.rint(2.0 * m / 255.0).astype(int)
        return m


# ---------------------------------------------------------------------------
# workers (module level so that they can be pickled)

_WORKER: dict = {}


def _init_worker(root: str, real: bool, delta) -> None:
    src = Source(Path(root), real)
    _WORKER["source"] = src
    _WORKER["ctx"] = src.context(delta)


def _map(func, items, threads: int, initargs):
    if threads <= 1 or len(items) <= 1:
        _init_worker(*initargs)
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads, initializer=_init_worker,
                             initargs=initargs) as pool:
        return list(pool.map(func, items))


def _reconstruct_one(job) -> dict:
    name, method, params, outdir, image_size = job
    src, ctx = _WORKER["source"], _WORKER["ctx"]
    out = Path(outdir)
    frame = src.frame(name)
    res = reconstruct(method, frame, ctx, params)
    sigma = res.sigma
    io.write_raw(out / "fields" / f"{name}.f64", sigma.values,
                 representation=sigma.representation, mesh_tag=ctx.mesh.tag, method=method)
    vmin, vmax = (0.0, 1.0) if method == "dsm-index" else IMAGE_RANGE
    grid = mesh_to_grid(ctx.mesh, sigma.values, image_size, fill=vmin)
    io.write_pgm(out / "images" / f"{name}.pgm", grid.values, vmin, vmax)
    if res.segmentation is not None:
        seg = mesh_to_grid(ctx.mesh, res.segmentation.astype(float), image_size, fill=255)
        io.write_pgm(out / "images" / f"{name}_seg.pgm", np.rint(seg.values), 0, 255)
        io.write_raw(out / "segmentation" / f"{name}.f64", res.segmentation.astype(float),
                     mesh_tag=ctx.mesh.tag, legend=SEG_LEGEND)
    if res.history:
        res.write_trace(out / "traces" / f"{name}.csv")
    flags = {k: v for k, v in res.flags.items() if k != "state"}
    return {"name": name, "wall_time": res.wall_time, "iterations": res.iterations,
            "flags": flags}


def _load_field(recdir: Path, name: str) -> Conductivity:
    arr, meta = io.read_raw(recdir / "fields" / f"{name}.f64")
    rep = meta.get("representation", "element")
    bounds = (0.0, 1.0) if meta.get("method") == "dsm-index" else (1e-3, 10.0)
    return Conductivity(arr, rep, bounds)


def _evaluate_one(job) -> dict:
    name, method, recdir = job
    src, ctx = _WORKER["source"], _WORKER["ctx"]
    rec = _load_field(Path(recdir), name)
    frame = src.frame(name)
    mesh = ctx.mesh
    row = {"name": name}
    if src.real:
        mask = src.mask(name)
        if mask is not None:
            grid = mesh_to_grid(mesh, rec.element_values(mesh), mask.shape[0])
            inside = grid.inside_mask
            pred, _ = segment(grid.values[inside])
            per = dice_per_class(mask[inside], pred)
            row["dice"] = float(np.nanmean(per)) if not np.all(np.isnan(per)) else float("nan")
        if method != "dsm-index":
            row["measurement_error"] = measurement_error(rec, frame, mesh, ctx.electrodes,
                                                         ctx.patterns)
        return row
    gt_arr, _ = io.read_raw(src.root / "phantoms" / f"{name}.f64")
    ph = Phantom.from_dict(json.loads((src.root / "phantoms" / f"{name}.phantom.json").read_text()))
    labels = ph.labels(mesh)
    if method == "dsm-index":
        # localization only: inclusion (any class) vs background at half maximum
        truth = labels != BACKGROUND
        pred = rec.element_values(mesh) >= 0.5
        a = mesh.element_areas
        denom = np.sum(a[truth]) + np.sum(a[pred])
        row["dice"] = float(2 * np.sum(a[truth & pred]) / denom) if denom > 0 else float("nan")
        return row
    rep = score_reconstruction(gt_arr, labels, rec, frame, mesh, ctx.electrodes, ctx.patterns)
    row.update(rep.to_dict())
    return row


# ---------------------------------------------------------------------------
# commands


def run_simulate(cfg: RunConfig) -> DatasetManifest:
    preset = PRESETS.get(cfg.preset or "ellipses")
    if preset is None:
        raise ConfigError(f"unknown preset {cfg.preset!r}; choose {', '.join(PRESETS)}")
    out = Path(cfg.output or f"data/{cfg.preset or 'ellipses'}").resolve()
    _check_writable(out)
    if (out / "manifest.json").exists() and not cfg.force:
        raise ConfigError(f"{out} already holds a dataset; use --force to overwrite")
    kind = cfg.kind or preset["kind"]
    if kind not in ("ellipses", "ood") + OOD_KINDS:
        raise ConfigError(f"unknown phantom kind {kind!r}")
    ds = DatasetConfig(
        output=str(out),
        n_train=preset["n_train"] if cfg.n_train is None else cfg.n_train,
        n_val=preset["n_val"] if cfg.n_val is None else cfg.n_val,
        n_test=preset["n_test"] if cfg.n_test is None else cfg.n_test,
        kind=kind,
    )
    if cfg.seed is not None:
        ds.master_seed = int(cfg.seed)
    if cfg.delta is not None:
        ds.delta = float(cfg.delta)
    if min(ds.n_train, ds.n_val, ds.n_test) < 0:
        raise ConfigError("split sizes must be non-negative")
    handler = _setup_run_log(out, cfg)
    try:
        return generate_dataset(ds)
    finally:
        logging.getLogger().removeHandler(handler)


def run_reconstruct(cfg: RunConfig) -> list[dict]:
    if cfg.method is None:
        raise ConfigError(f"--method is required; choose one of {', '.join(METHODS)}")
    check_method(cfg.method)
    make_config(cfg.method, cfg.params)  # validate before any work
    src = Source.open(cfg.dataset)
    names = src.names(cfg.frames)
    if cfg.limit is not None:
        names = names[: cfg.limit]
    if not names:
        raise MissingInputs("no frames selected")
    root = Path(cfg.output or src.root / "recon")
    outdir = root / cfg.method
    _check_writable(outdir)
    existing = [n for n in names if (outdir / "fields" / f"{n}.f64").exists()]
    if existing and not cfg.force:
        raise ConfigError(f"{len(existing)} reconstruction(s) already exist in {outdir}; "
                          "use --force to overwrite")
    handler = _setup_run_log(outdir, cfg)
    try:
        io.write_json(outdir / "params.json",
                      {"method": cfg.method, "params": asdict(make_config(cfg.method, cfg.params)),
                       "dataset": str(src.root), "frames": cfg.frames})
        jobs = [(n, cfg.method, cfg.params, str(outdir), cfg.image_size) for n in names]
        t0 = time.perf_counter()
        rows = _map(_reconstruct_one, jobs, cfg.threads, (str(src.root), src.real, cfg.delta))
        io.write_json(outdir / "timing.json",
                      {"total_wall_time": time.perf_counter() - t0,
                       "frames": {r["name"]: r["wall_time"] for r in rows}})
        io.write_json(outdir / "flags.json", {r["name"]: r["flags"] for r in rows})
        if cfg.method == "level-set":
            io.write_json(outdir / "segmentation_legend.json", SEG_LEGEND)
        log.info("%s: reconstructed %d frame(s) into %s", cfg.method, len(rows), outdir)
        return rows
    finally:
        logging.getLogger().removeHandler(handler)


def run_evaluate(cfg: RunConfig) -> dict:
    if cfg.method is None:
        raise ConfigError("--method is required")
    check_method(cfg.method)
    src = Source.open(cfg.dataset)
    recdir = Path(cfg.recon or src.root / "recon") / cfg.method
    names = src.names(cfg.frames)
    if cfg.limit is not None:
        names = names[: cfg.limit]
    if not names:
        raise MissingInputs("no frames selected")
    missing = [n for n in names if not (recdir / "fields" / f"{n}.f64").is_file()]
    present = [n for n in names if n not in missing]
    if not present:
        raise MissingInputs(f"no reconstructions found in {recdir}: " + ", ".join(missing[:10]))
    outdir = Path(cfg.output) if cfg.output else recdir
    _check_writable(outdir)
    jobs = [(n, cfg.method, str(recdir)) for n in present]
    rows = _map(_evaluate_one, jobs, cfg.threads, (str(src.root), src.real, cfg.delta))
    keys: list[str] = []
    for r in rows:
        keys.extend(k for k in r if k not in keys and k != "dice_per_class")
    with open(outdir / "scores.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        header = keys + ([f"dice_{c}" for c in CLASS_NAMES] if any("dice_per_class" in r for r in rows) else [])
        w.writerow(header)
        for r in rows:
            line = [r.get(k, "") for k in keys]
            if len(header) > len(keys):
                line += list(r.get("dice_per_class", [""] * 3))
            w.writerow(line)
    reports = [ScoreReport(**{k: r[k] for k in ScoreReport.__dataclass_fields__ if k in r})
               for r in rows]
    summary = summarize(reports)
    if src.real:
        summary = {"n": summary["n"], "dice": summary["dice"],
                   "measurement_error": summary["measurement_error"]}
    summary.update(method=cfg.method, dataset=str(src.root), frames=cfg.frames,
                   missing=missing)
    io.write_json(outdir / "summary.json", summary)
    if missing:
        raise MissingInputs(f"{len(missing)} reconstruction(s) missing: " + ", ".join(missing[:10]))
    return summary


def _fmt(entry, key):
    if entry is None or entry.get(key) is None:
        return "-"
    if key == "median":
        return f"{entry['median']:.3g} ({entry['q25']:.3g}, {entry['q75']:.3g})"
    return f"{entry['mean']:.3f} ± {entry['std']:.3f}"


def run_report(cfg: RunConfig) -> str:
    """Collect ``summary.json`` files into a score table (Markdown and CSV)."""
    paths: list[Path] = []
    for p in cfg.inputs or ([cfg.recon] if cfg.recon else []):
        p = Path(p)
        paths.extend(sorted(p.glob("*/summary.json")) if p.is_dir() and not
                     (p / "summary.json").exists() else [p / "summary.json" if p.is_dir() else p])
    paths = [p for p in paths if p.is_file()]
    if not paths:
        raise MissingInputs("no summary.json files found")
    order = {m: i for i, m in enumerate((BASELINE_METHOD,) + METHODS)}
    summaries = sorted((json.loads(p.read_text()) for p in paths),
                       key=lambda s: order.get(s.get("method"), 99))
    cols = ("rel_l1", "rel_l2", "dice", "dynamic_range")
    lines = ["| method | n | rel L1 | rel L2 | Dice | DR | meas. error median (q25, q75) |",
             "|---|---|---|---|---|---|---|"]
    rows = []
    for s in summaries:
        cells = [_fmt(s.get(c), "mean") for c in cols] + [_fmt(s.get("measurement_error"), "median")]
        lines.append(f"| {s.get('method')} | {s.get('n')} | " + " | ".join(cells) + " |")
        rows.append([s.get("method"), s.get("n")] + cells)
    table = "\n".join(lines) + "\n"
    out = Path(cfg.output) if cfg.output else paths[0].parent.parent
    _check_writable(out)
    (out / "report.md").write_text(table)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n", "rel_l1", "rel_l2", "dice", "dynamic_range",
                    "measurement_error"])
        w.writerows(rows)
    print(table, end="")
    return table


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    methods = ", ".join(METHODS + (BASELINE_METHOD,))
    p = argparse.ArgumentParser(prog="cemeit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="TOML or JSON file with option defaults")
        if dataset:
            sp.add_argument("--dataset", help="dataset directory (manifest.json or frames/*.csv)")
        sp.add_argument("--output", help="output directory")
        sp.add_argument("--threads", type=int,
                        help=f"worker processes (default: ${THREADS_ENV} or 1)")

    s = sub.add_parser("simulate", help="generate a phantom/measurement dataset")
    common(s, dataset=False)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--kind", help="ellipses, ood or one of " + ", ".join(OOD_KINDS))
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("--delta", type=float, help="relative noise level")
    s.add_argument("--force", action="store_true", default=None)
    s.set_defaults(func=run_simulate)

    r = sub.add_parser("reconstruct", help="run a reconstruction method on a dataset")
    common(r)
    r.add_argument("--method", help=methods)
    r.add_argument("--frames", help="split: train, val, test or all (default test)")
    r.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="hyperparameter override (repeatable; values parsed as JSON)")
    r.add_argument("--limit", type=int, help="only the first N frames")
    r.add_argument("--image-size", type=int, help="PGM resolution (default 128)")
    r.add_argument("--delta", type=float, help="noise level for real data (default 0.005)")
    r.add_argument("--force", action="store_true", default=None)
    r.set_defaults(func=run_reconstruct)

    e = sub.add_parser("evaluate", help="score reconstructions")
    common(e)
    e.add_argument("--method", help=methods)
    e.add_argument("--recon", help="reconstruction root (default <dataset>/recon)")
    e.add_argument("--frames")
    e.add_argument("--limit", type=int)
    e.set_defaults(func=run_evaluate)

    t = sub.add_parser("report", help="tabulate summary.json files")
    t.add_argument("--config")
    t.add_argument("inputs", nargs="*", help="summary files or directories")
    t.add_argument("--recon", help="reconstruction root with <method>/summary.json")
    t.add_argument("--output")
    t.set_defaults(func=run_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = args.func(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInputs as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: missing input {exc.filename}", file=sys.stderr)
        return EXIT_MISSING
    if args.command == "evaluate":
        print(json.dumps({k: v for k, v in result.items() if k != "missing"}, indent=1))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""File formats: raw float64 arrays with JSON sidecars, PGM images, CSV frames."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .fem import MeasurementFrame


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def write_raw(path, array, **meta) -> None:
    """Write a little-endian float64 array (row-major) plus ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype="<f8")
    path.write_bytes(arr.tobytes())
    meta = {"shape": list(arr.shape), **meta}
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))


def read_raw(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f8").copy()
    if "shape" in meta:
        arr = arr.reshape(meta["shape"])
    return arr, meta


def write_frame(path, frame: MeasurementFrame) -> None:
    write_raw(
        path,
        frame.voltages,
        K=frame.K,
        L=frame.L,
        delta=frame.delta,
        pattern_kind=frame.pattern_kind,
        amplitude=frame.amplitude,
        seed=frame.seed,
        mesh_tag=frame.mesh_tag,
    )


def read_frame(path) -> MeasurementFrame:
    arr, meta = read_raw(path)
    return MeasurementFrame(
        arr.ravel(),
        int(meta["K"]),
        int(meta["L"]),
        float(meta.get("delta", 0.0)),
        meta.get("pattern_kind", "adjacent"),
        float(meta.get("amplitude", 1.0)),
        meta.get("seed"),
        meta.get("mesh_tag", ""),
    )


def read_frame_csv(path, delta: float = 0.0, pattern_kind="adjacent", amplitude=1.0):
    """One row per pattern; the header names the electrodes (e.g. ``E1..E16``).

    Columns are reordered by the integer in each header name, so files
    written in any electrode order load consistently.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], [r for r in rows[1:] if r]
    order = [int("".join(ch for ch in h if ch.isdigit())) for h in header]
    perm = np.argsort(order)
    data = np.array([[float(v) for v in r] for r in body])
    if data.shape[1] != len(header):
        raise DimensionError("CSV rows do not match the header width")
    data = data[:, perm]
    K, L = data.shape
    return MeasurementFrame(data.ravel(), K, L, delta, pattern_kind, amplitude,
                            None, f"csv:{Path(path).name}")


def write_frame_csv(path, frame: MeasurementFrame) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"E{i + 1}" for i in range(frame.L)])
        for row in frame.matrix:
            w.writerow([repr(float(v)) for v in row])


def write_pgm(path, image, vmin=None, vmax=None, bits: int = 8) -> None:
    """Binary PGM (P5); values are mapped linearly from [vmin, vmax]."""
    img = np.asarray(image, dtype=float)
    vmin = float(np.min(img)) if vmin is None else float(vmin)
    vmax = float(np.max(img)) if vmax is None else float(vmax)
    maxval = 255 if bits == 8 else 65535
    scale = (img - vmin) / (vmax - vmin) if vmax > vmin else np.zeros_like(img)
    q = np.clip(np.rint(scale * maxval), 0, maxval)
    dtype = ">u1" if bits == 8 else ">u2"
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("only binary PGM (P5) is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u1" if maxval < 256 else ">u2"
    return np.frombuffer(raw[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(int)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")

"""Evaluation scores computed on FEM meshes."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedMetricError
from .fem import (
    Conductivity,
    CurrentPatterns,
    ElectrodeModel,
    MeasurementFrame,
    forward_voltages,
)
from .mesh import Mesh, mesh_to_grid

RESISTIVE, BACKGROUND, CONDUCTIVE = 0, 1, 2
CLASS_NAMES = ("resistive", "background", "conductive")


def _element_field(x, mesh: Mesh) -> np.ndarray:
    if isinstance(x, Conductivity):
        return x.element_values(mesh)
    x = np.asarray(x, dtype=float)
    if len(x) == mesh.n_nodes and len(x) != mesh.n_elements:
        return mesh.node_to_element_average @ x
    return x


def relative_errors(gt, rec, mesh: Mesh) -> tuple[float, float]:
    """Area-weighted relative L1 error and the squared-norm relative L2 error."""
    g = _element_field(gt, mesh)
    r = _element_field(rec, mesh)
    a = mesh.element_areas
    n1 = np.sum(a * np.abs(g))
    n2 = np.sum(a * g**2)
    if n1 == 0:
        raise UndefinedMetricError("ground truth has zero norm")
    return float(np.sum(a * np.abs(g - r)) / n1), float(np.sum(a * (g - r) ** 2) / n2)


def dynamic_range(gt, rec) -> float:
    gt = np.asarray(gt.values if isinstance(gt, Conductivity) else gt, dtype=float)
    rec = np.asarray(rec.values if isinstance(rec, Conductivity) else rec, dtype=float)
    span = gt.max() - gt.min()
    if span == 0:
        raise UndefinedMetricError("dynamic range undefined for constant ground truth")
    return float((rec.max() - rec.min()) / span)


@dataclass
class OtsuResult:
    thresholds: tuple[float, float]
    degenerate: bool = False


def _between_class_variance(hist: np.ndarray, centers: np.ndarray):
    """Tables of cumulative weight and first moment for O(1) class statistics."""
    w = np.concatenate([[0.0], np.cumsum(hist)])
    m = np.concatenate([[0.0], np.cumsum(hist * centers)])
    return w, m


def otsu_thresholds(values, classes: int = 3, bins: int = 256, weights=None) -> OtsuResult:
    """Two thresholds maximizing the between-class variance of a histogram.

    The search is exhaustive over all pairs of bin edges.  Inputs with fewer
    than three distinct values are flagged ``degenerate``.
    """
    if classes != 3:
        raise ValueError("only three-class thresholding is supported")
    v = np.asarray(values, dtype=float).ravel()
    lo, hi = float(v.min()), float(v.max())
    if len(np.unique(v)) < 3 or hi <= lo:
        return OtsuResult((lo, hi), degenerate=True)
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi), weights=weights)
    hist = hist / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w, m = _between_class_variance(hist, centers)
    total_m = m[-1]
    # class k spans bins [i_k, i_{k+1}); thresholds after bin i-1 and j-1
    i = np.arange(1, bins - 1)[:, None]
    j = np.arange(2, bins)[None, :]
    valid = j > i
    w0, m0 = w[i], m[i]
    w1, m1 = w[j] - w[i], m[j] - m[i]
    w2, m2 = 1.0 - w[j], total_m - m[j]
    with np.errstate(divide="ignore", invalid="ignore"):
        score = (
            np.where(w0 > 0, m0**2 / w0, 0.0)
            + np.where(w1 > 0, m1**2 / w1, 0.0)
            + np.where(w2 > 0, m2**2 / w2, 0.0)
        )
    score = np.where(valid, score, -np.inf)
    k = np.unravel_index(np.argmax(score), score.shape)
    t1 = edges[i[k[0], 0]]
    t2 = edges[j[0, k[1]]]
    return OtsuResult((float(t1), float(t2)))


def segment(values, weights=None, bins: int = 256, background: float | None = None):
    """Three-class labels (resistive / background / conductive) via Otsu.

    The Otsu class containing ``background`` (default: the weighted median)
    is the background.  When it is the lowest (highest) class, the middle
    class joins whichever neighbour has the closer mean, so no resistive
    (conductive) region is invented.  When it is the middle class the lower
    and upper classes are resistive and conductive as they stand; a noisy
    background split by Otsu can therefore yield a spurious class.  A field
    with two levels labels the one away from ``background`` as an inclusion.
    """
    v = np.asarray(values, dtype=float).ravel()
    labels = np.full(len(v), BACKGROUND)
    res = otsu_thresholds(v, 3, bins, weights)
    w = np.ones_like(v) if weights is None else np.asarray(weights, dtype=float)
    if background is None:
        order = np.argsort(v)
        cw = np.cumsum(w[order])
        background = v[order][np.searchsorted(cw, 0.5 * cw[-1])]
    if res.degenerate:
        # at most two levels: the one that is not the background is an inclusion
        levels = np.unique(v)
        if len(levels) == 2:
            other = levels[np.argmax(np.abs(levels - background))]
            labels[v == other] = CONDUCTIVE if other > background else RESISTIVE
        return labels, res
    t1, t2 = res.thresholds
    raw = np.where(v <= t1, 0, np.where(v <= t2, 1, 2))
    b = int(np.where(background <= t1, 0, np.where(background <= t2, 1, 2)))
    means = np.array([np.average(v[raw == c], weights=w[raw == c]) if np.any(raw == c)
                      else np.nan for c in range(3)])
    mapping = {b: BACKGROUND}
    if b == 1:
        mapping.update({0: RESISTIVE, 2: CONDUCTIVE})
    elif b == 0:
        mapping[2] = CONDUCTIVE
        closer_top = abs(means[1] - means[2]) < abs(means[1] - means[0])
        mapping[1] = CONDUCTIVE if closer_top else BACKGROUND
    else:
        mapping[0] = RESISTIVE
        closer_bottom = abs(means[1] - means[0]) < abs(means[1] - means[2])
        mapping[1] = RESISTIVE if closer_bottom else BACKGROUND
    for c, lab in mapping.items():
        labels[raw == c] = lab
    return labels, res


def dice_per_class(gt_labels, pred_labels, weights=None, absent: str = "ignore") -> np.ndarray:
    """Area-weighted Dice for each class; classes absent from both are NaN
    (``absent="ignore"``) or 1 (``absent="one"``)."""
    g = np.asarray(gt_labels)
    p = np.asarray(pred_labels)
    w = np.ones(len(g)) if weights is None else np.asarray(weights, dtype=float)
    out = np.empty(3)
    for c in range(3):
        tp = np.sum(w[(g == c) & (p == c)])
        fp = np.sum(w[(g != c) & (p == c)])
        fn = np.sum(w[(g == c) & (p != c)])
        denom = 2 * tp + fp + fn
        if denom == 0:
            out[c] = np.nan if absent == "ignore" else 1.0
        else:
            out[c] = 2 * tp / denom
    return out


def dice_score(gt_labels, rec, mesh: Mesh, absent: str = "ignore", background=None,
               grid_resolution: int | None = None):
    """Mean Dice over the three classes after Otsu segmentation of ``rec``.

    By default segmentation and overlap are area weighted on the mesh
    elements.  With ``grid_resolution`` both fields are first sampled on an
    n x n pixel grid and only pixels inside the disk count (image-pipeline
    parity).  Returns ``(score, per_class, predicted_labels)``; the labels
    live on the elements or on the in-disk pixels accordingly.
    """
    r = _element_field(rec, mesh)
    g = np.asarray(gt_labels)
    if grid_resolution is None:
        pred, _ = segment(r, weights=mesh.element_areas, background=background)
        per = dice_per_class(g, pred, mesh.element_areas, absent)
    else:
        rg = mesh_to_grid(mesh, r, grid_resolution)
        gg = mesh_to_grid(mesh, g.astype(float), grid_resolution)
        inside = rg.inside_mask
        pred, _ = segment(rg.values[inside], background=background)
        per = dice_per_class(np.rint(gg.values[inside]).astype(int), pred, None, absent)
    if np.all(np.isnan(per)):
        return float("nan"), per, pred
    return float(np.nanmean(per)), per, pred


def measurement_error(
    rec,
    data: MeasurementFrame,
    mesh: Mesh,
    electrodes: ElectrodeModel,
    patterns: CurrentPatterns,
) -> float:
    """||F(rec) I - U_delta||^2 / ||U_delta||^2 with one forward solve."""
    if not isinstance(rec, Conductivity):
        rec = Conductivity(np.asarray(rec, dtype=float))
    u = forward_voltages(mesh, rec, electrodes, patterns)
    d = data.voltages
    return float(np.sum((u - d) ** 2) / np.sum(d**2))


@dataclass
class ScoreReport:
    rel_l1: float = float("nan")
    rel_l2: float = float("nan")
    dice: float = float("nan")
    dynamic_range: float = float("nan")
    measurement_error: float = float("nan")
    dice_per_class: list = field(default_factory=lambda: [float("nan")] * 3)

    def to_dict(self):
        return asdict(self)


def score_reconstruction(gt, gt_labels, rec, data, mesh, electrodes, patterns) -> ScoreReport:
    g = _element_field(gt, mesh)
    r = _element_field(rec, mesh)
    l1, l2 = relative_errors(g, r, mesh)
    ds, per, _ = dice_score(gt_labels, r, mesh)
    rec_c = rec if isinstance(rec, Conductivity) else Conductivity(r)
    me = measurement_error(rec_c, data, mesh, electrodes, patterns)
    return ScoreReport(l1, l2, ds, dynamic_range(g, r), me, [float(x) for x in per])


def summarize(reports: list) -> dict:
    """Mean/std of each score, median and quartiles for the measurement error."""
    out = {"n": len(reports)}
    for key in ("rel_l1", "rel_l2", "dice", "dynamic_range"):
        x = np.array([getattr(r, key) for r in reports], dtype=float)
        x = x[np.isfinite(x)]
        out[key] = {"mean": float(np.mean(x)) if len(x) else None,
                    "std": float(np.std(x)) if len(x) else None}
    me = np.array([r.measurement_error for r in reports], dtype=float)
    me = me[np.isfinite(me)]
    if len(me):
        q25, q50, q75 = np.percentile(me, [25, 50, 75])
        out["measurement_error"] = {"median": float(q50), "q25": float(q25), "q75": float(q75)}
    else:
        out["measurement_error"] = None
    return out

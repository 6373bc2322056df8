"""Saliency agreement metrics over maps and fixation sets.

Seven evaluation scores (cc, kl, nss, auc_judd, sauc, sim, ig) plus
tape-node versions of cc and kl for use as training losses. Map-vs-map
metrics normalize internally where the definition requires it, so
callers may pass maps in any normalization state.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import autodiff as ad
from .errors import (
    DegenerateMapError,
    PreconditionError,
    ShapeMismatchError,
)
from .gaze import (
    Fixation,
    Normalization,
    SaliencyMap,
    group_fixations,
    make_map,
    normalize_map,
    read_map_tsal,
)

EPS = 1e-7


def _paired(p: SaliencyMap, g: SaliencyMap) -> tuple[np.ndarray, np.ndarray]:
    if (p.height, p.width) != (g.height, g.width):
        raise ShapeMismatchError(
            f"maps disagree in size: {p.width}x{p.height} vs {g.width}x{g.height}")
    return p.values.reshape(-1), g.values.reshape(-1)


def _sum_normalized(v: np.ndarray, what: str) -> np.ndarray:
    total = v.sum()
    if total <= 0.0:
        raise DegenerateMapError(f"{what} map is all-zero")
    return v / total


def fixation_pixels(fixations: list[Fixation], width: int, height: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-pixel indices (rows, cols) for each fixation, in order."""
    if not fixations:
        raise PreconditionError("at least one fixation required")
    rows = np.empty(len(fixations), dtype=np.intp)
    cols = np.empty(len(fixations), dtype=np.intp)
    for i, f in enumerate(fixations):
        if not (0.0 <= f.x < width and 0.0 <= f.y < height):
            raise PreconditionError(
                f"fixation at ({f.x}, {f.y}) outside {width}x{height} map")
        cols[i] = min(int(math.floor(f.x + 0.5)), width - 1)
        rows[i] = min(int(math.floor(f.y + 0.5)), height - 1)
    return rows, cols


def cc(p: SaliencyMap, g: SaliencyMap) -> float:
    """Pearson correlation of the flattened maps."""
    pv, gv = _paired(p, g)
    pc = pv - pv.mean()
    gc = gv - gv.mean()
    denom = math.sqrt((pc * pc).sum() * (gc * gc).sum())
    if denom == 0.0:
        raise DegenerateMapError("cc is undefined for a constant map")
    return float((pc * gc).sum() / denom)


def kl(p: SaliencyMap, g: SaliencyMap, eps: float = EPS) -> float:
    """Divergence of the prediction p from the ground truth g, with the
    usual benchmark regularization inside and outside the log."""
    pv, gv = _paired(p, g)
    pn = _sum_normalized(pv, "prediction")
    gn = _sum_normalized(gv, "ground-truth")
    return float((gn * np.log(gn / (pn + eps) + eps)).sum())


def nss(p: SaliencyMap, fixations: list[Fixation]) -> float:
    """Mean standardized saliency at the fixated pixels."""
    rows, cols = fixation_pixels(fixations, p.width, p.height)
    sigma = p.values.std()
    if sigma == 0.0:
        raise DegenerateMapError("nss is undefined for a constant map")
    z = (p.values - p.values.mean()) / sigma
    return float(z[rows, cols].mean())


def _roc_area(points: list[tuple[float, float]]) -> float:
    area = 0.0
    for (fp0, tp0), (fp1, tp1) in zip(points, points[1:]):
        area += (fp1 - fp0) * (tp0 + tp1) / 2.0
    return area


def auc_judd(p: SaliencyMap, fixations: list[Fixation]) -> float:
    """ROC area with thresholds at the distinct fixated saliency values;
    false positives counted over non-fixated pixels."""
    rows, cols = fixation_pixels(fixations, p.width, p.height)
    pos = p.values[rows, cols]
    mask = np.zeros(p.values.shape, dtype=bool)
    mask[rows, cols] = True
    neg = p.values[~mask]
    if neg.size == 0:
        raise PreconditionError("every pixel is fixated; no negatives left")
    points = [(0.0, 0.0)]
    for th in sorted(set(pos.tolist()), reverse=True):
        tp = float((pos >= th).sum()) / pos.size
        fp = float((neg >= th).sum()) / neg.size
        points.append((fp, tp))
    points.append((1.0, 1.0))
    return _roc_area(points)


def sauc(p: SaliencyMap, fixations: list[Fixation],
         negatives: list[Fixation], seed: int = 0) -> float:
    """Shuffled ROC area: false positives over negative fixation pixels
    (fixations of other images), capped at 10x the positives by seeded
    subsampling. Thresholds sweep every distinct value on either side,
    which makes the trapezoid area equal the rank statistic
    P(pos > neg) + 0.5 P(pos == neg) exactly."""
    if not negatives:
        raise PreconditionError("sauc requires a non-empty negative set")
    prows, pcols = fixation_pixels(fixations, p.width, p.height)
    nrows, ncols = fixation_pixels(negatives, p.width, p.height)
    pos = p.values[prows, pcols]
    neg = p.values[nrows, ncols]
    cap = 10 * pos.size
    if neg.size > cap:
        rng = np.random.default_rng(seed)
        neg = neg[rng.choice(neg.size, size=cap, replace=False)]
    points = [(0.0, 0.0)]
    for th in sorted(set(pos.tolist()) | set(neg.tolist()), reverse=True):
        tp = float((pos >= th).sum()) / pos.size
        fp = float((neg >= th).sum()) / neg.size
        points.append((fp, tp))
    points.append((1.0, 1.0))
    return _roc_area(points)


def sim(p: SaliencyMap, g: SaliencyMap) -> float:
    """Histogram intersection of the sum-normalized maps."""
    pv, gv = _paired(p, g)
    pn = _sum_normalized(pv, "prediction")
    gn = _sum_normalized(gv, "ground-truth")
    return float(np.minimum(pn, gn).sum())


def ig(p: SaliencyMap, baseline: SaliencyMap, fixations: list[Fixation],
       eps: float = EPS) -> float:
    """Information gain in bits over a baseline at the fixated pixels."""
    pv, bv = _paired(p, baseline)
    pn = _sum_normalized(pv, "prediction").reshape(p.values.shape)
    bn = _sum_normalized(bv, "baseline").reshape(p.values.shape)
    rows, cols = fixation_pixels(fixations, p.width, p.height)
    gain = np.log2(pn[rows, cols] + eps) - np.log2(bn[rows, cols] + eps)
    return float(gain.mean())


def center_baseline(width: int, height: int,
                    sigma: float | None = None) -> SaliencyMap:
    """Isotropic center Gaussian prior, sum-normalized."""
    if sigma is None:
        sigma = 0.25 * min(width, height)
    ys = np.arange(height) - (height - 1) / 2.0
    xs = np.arange(width) - (width - 1) / 2.0
    g = np.exp(-(ys[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma * sigma))
    return make_map(g / g.sum(), Normalization.SUM_TO_ONE)


def mean_map(maps: list[SaliencyMap]) -> SaliencyMap:
    """Pixel-wise mean of sum-normalized maps, renormalized. Used as the
    dataset-level information-gain baseline."""
    if not maps:
        raise PreconditionError("mean_map of an empty list")
    acc = np.zeros((maps[0].height, maps[0].width))
    for m in maps:
        mv, _ = _paired(m, maps[0])
        acc += _sum_normalized(mv, "map").reshape(acc.shape)
    acc /= len(maps)
    return make_map(acc / acc.sum(), Normalization.SUM_TO_ONE)


# ---------------------------------------------------------------------------
# Differentiable loss nodes
# ---------------------------------------------------------------------------

def cc_loss_node(pred: ad.Tensor, gt: ad.Tensor) -> ad.Tensor:
    """Pearson correlation as a tape node (same value as cc())."""
    if pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"cc_loss_node: shapes {pred.shape} and {gt.shape} differ")
    if pred.data.std() == 0.0 or gt.data.std() == 0.0:
        raise DegenerateMapError("cc is undefined for a constant map")
    pc = ad.sub(pred, ad.reduce_mean(pred))
    gc = ad.sub(gt, ad.reduce_mean(gt))
    cov = ad.reduce_mean(ad.mul(pc, gc))
    return ad.div(cov, ad.mul(ad.std(pred), ad.std(gt)))


def kl_loss_node(pred: ad.Tensor, gt: ad.Tensor, eps: float = EPS) -> ad.Tensor:
    """Regularized divergence of pred from gt as a tape node, with both
    inputs sum-normalized on the tape (same value as kl())."""
    if pred.shape != gt.shape:
        raise ShapeMismatchError(
            f"kl_loss_node: shapes {pred.shape} and {gt.shape} differ")
    if pred.data.sum() <= 0.0 or gt.data.sum() <= 0.0:
        raise DegenerateMapError("kl is undefined for an all-zero map")
    p = ad.div(pred, ad.reduce_sum(pred))
    g = ad.div(gt, ad.reduce_sum(gt))
    ratio = ad.add(ad.div(g, ad.add(p, p.tape.constant(eps))),
                   p.tape.constant(eps))
    return ad.reduce_sum(ad.mul(g, ad.log(ratio)))


# ---------------------------------------------------------------------------
# Batch evaluation over map directories
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("cc", "kl", "nss", "auc_judd", "sauc", "sim", "ig")


def evaluate_pair(pred: SaliencyMap, gt: SaliencyMap,
                  fixations: list[Fixation], negatives: list[Fixation],
                  baseline: SaliencyMap, seed: int = 0) -> dict[str, float]:
    return {
        "cc": cc(pred, gt),
        "kl": kl(pred, gt),
        "nss": nss(pred, fixations),
        "auc_judd": auc_judd(pred, fixations),
        "sauc": sauc(pred, fixations, negatives, seed=seed),
        "sim": sim(pred, gt),
        "ig": ig(pred, baseline, fixations),
    }


def evaluate_directories(pred_dir: str, gt_dir: str,
                         fixations: list[Fixation], seed: int = 0
                         ) -> tuple[list[str], list[dict[str, float]]]:
    """Score every map pair. Maps pair by file name (<image_id>.tsal);
    negatives for one image are all other images' fixations; the
    information-gain baseline is the mean ground-truth map.

    Returns (image ids, per-image metric dicts) in sorted id order.
    """
    pred_files = {f for f in os.listdir(pred_dir) if f.endswith(".tsal")}
    gt_files = {f for f in os.listdir(gt_dir) if f.endswith(".tsal")}
    if pred_files != gt_files:
        only_p = sorted(pred_files - gt_files)
        only_g = sorted(gt_files - pred_files)
        raise PreconditionError(
            f"prediction/ground-truth directories disagree "
            f"(only in pred: {only_p}, only in gt: {only_g})")
    if not pred_files:
        raise PreconditionError("no .tsal maps to evaluate")

    image_ids = sorted(f[:-5] for f in pred_files)
    by_image = {}
    for (image_id, _), fixes in group_fixations(fixations).items():
        by_image.setdefault(image_id, []).extend(fixes)

    gt_maps = {i: read_map_tsal(os.path.join(gt_dir, i + ".tsal"))
               for i in image_ids}
    baseline = mean_map([gt_maps[i] for i in image_ids])

    rows = []
    for image_id in image_ids:
        pred = read_map_tsal(os.path.join(pred_dir, image_id + ".tsal"))
        fixes = by_image.get(image_id, [])
        if not fixes:
            raise PreconditionError(f"no fixations for image {image_id!r}")
        negatives = [f for other, fl in by_image.items() if other != image_id
                     for f in fl]
        rows.append(evaluate_pair(pred, gt_maps[image_id], fixes, negatives,
                                  baseline, seed=seed))
    return image_ids, rows


def metrics_csv(image_ids: list[str], rows: list[dict[str, float]]) -> str:
    """Render per-image scores plus a final mean row."""
    lines = ["image_id," + ",".join(METRIC_COLUMNS)]
    for image_id, row in zip(image_ids, rows):
        lines.append(image_id + "," +
                     ",".join(repr(row[c]) for c in METRIC_COLUMNS))
    means = [sum(r[c] for r in rows) / len(rows) for c in METRIC_COLUMNS]
    lines.append("mean," + ",".join(repr(v) for v in means))
    return "\n".join(lines) + "\n"

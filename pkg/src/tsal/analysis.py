"""Dataset-level temporal structure statistics.

Works over per-image stacks of temporal slice maps: average slice maps,
consecutive attention-shift differences, the inter-slice correlation
matrix, intra-slice deviation scores, a saliency-over-time histogram,
and a paired t test with a hand-rolled Student CDF.

A slice map is "usable" when it is non-constant; all-zero maps (a slice
interval with no fixations) and otherwise constant maps are excluded
per affected average, and every exclusion is counted so callers can see
how much data supported each entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateMapError,
    PreconditionError,
    ZeroVarianceError,
)
from .gaze import Fixation, Normalization, SaliencyMap, group_fixations, make_map
from .metrics import cc, fixation_pixels

T_CAP = 1e12  # reported instead of an infinite statistic


@dataclass(frozen=True)
class AverageSliceSet:
    maps: tuple[SaliencyMap, ...]          # A_1..A_n, SumToOne
    image_count: int
    skipped: tuple[int, ...]               # per-slice unusable-map count


@dataclass(frozen=True)
class SliceCorrelationMatrix:
    values: np.ndarray                     # n x n mean CC
    n: int
    image_count: int
    skipped: np.ndarray                    # n x n excluded-image counts


@dataclass(frozen=True)
class DeviationScores:
    scores: tuple[float, ...]              # per-slice mean CC to the average
    image_count: int
    skipped: tuple[int, ...]


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    dof: int
    overflow: bool                         # zero-variance, nonzero-mean guard


def _usable(m: SaliencyMap) -> bool:
    return m.values.max() > m.values.min()


def _check_dataset(dataset: dict[str, list[SaliencyMap]]) -> int:
    if not dataset:
        raise PreconditionError("empty dataset")
    lengths = {len(maps) for maps in dataset.values()}
    if len(lengths) != 1:
        raise PreconditionError(f"inconsistent slice counts: {sorted(lengths)}")
    n = lengths.pop()
    if n < 1:
        raise PreconditionError("dataset has zero slices per image")
    sizes = {(m.height, m.width) for maps in dataset.values() for m in maps}
    if len(sizes) != 1:
        raise PreconditionError(f"inconsistent map sizes: {sorted(sizes)}")
    return n


def average_slices(dataset: dict[str, list[SaliencyMap]]) -> AverageSliceSet:
    """A_j = pixel mean of every usable image's sum-normalized slice-j
    map. Images are accumulated in sorted id order, so the result is
    bit-identical no matter how the dataset dict was built."""
    n = _check_dataset(dataset)
    ids = sorted(dataset)
    maps: list[SaliencyMap] = []
    skipped: list[int] = []
    shape = (dataset[ids[0]][0].height, dataset[ids[0]][0].width)
    for j in range(n):
        acc = np.zeros(shape)
        used = 0
        for image_id in ids:
            m = dataset[image_id][j]
            if not _usable(m):
                continue
            acc += m.values / m.values.sum()
            used += 1
        if used == 0:
            raise DegenerateMapError(
                f"slice {j}: no usable map in any image")
        acc /= used
        maps.append(make_map(acc / acc.sum(), Normalization.SUM_TO_ONE))
        skipped.append(len(ids) - used)
    return AverageSliceSet(maps=tuple(maps), image_count=len(ids),
                           skipped=tuple(skipped))


def inter_slice_cc(dataset: dict[str, list[SaliencyMap]]
                   ) -> SliceCorrelationMatrix:
    """Mean over images of CC between each pair of slice maps. An image
    missing a usable map for either slice of a pair is excluded from
    that pair's average and counted in ``skipped``."""
    n = _check_dataset(dataset)
    ids = sorted(dataset)
    values = np.zeros((n, n))
    skipped = np.zeros((n, n), dtype=np.int64)
    for j in range(n):
        for k in range(j, n):
            total = 0.0
            used = 0
            for image_id in ids:
                mj, mk = dataset[image_id][j], dataset[image_id][k]
                if not (_usable(mj) and _usable(mk)):
                    continue
                total += 1.0 if j == k else cc(mj, mk)
                used += 1
            if used == 0:
                raise DegenerateMapError(
                    f"slice pair ({j},{k}): no image has both maps usable")
            values[j, k] = values[k, j] = total / used
            skipped[j, k] = skipped[k, j] = len(ids) - used
    return SliceCorrelationMatrix(values=values, n=n, image_count=len(ids),
                                  skipped=skipped)


def intra_slice_deviation(dataset: dict[str, list[SaliencyMap]],
                          averages: AverageSliceSet) -> DeviationScores:
    """Mean over images of CC between the image's slice-j map and the
    dataset average A_j."""
    n = _check_dataset(dataset)
    if len(averages.maps) != n:
        raise PreconditionError(
            f"average set has {len(averages.maps)} slices, dataset has {n}")
    ids = sorted(dataset)
    scores: list[float] = []
    skipped: list[int] = []
    for j in range(n):
        total = 0.0
        used = 0
        for image_id in ids:
            m = dataset[image_id][j]
            if not _usable(m):
                continue
            total += cc(m, averages.maps[j])
            used += 1
        if used == 0:
            raise DegenerateMapError(f"slice {j}: no usable map")
        scores.append(total / used)
        skipped.append(len(ids) - used)
    return DeviationScores(scores=tuple(scores), image_count=len(ids),
                           skipped=tuple(skipped))


def consecutive_differences(averages: AverageSliceSet) -> list[np.ndarray]:
    """Signed attention-shift maps D_k = A_{k+1} - A_k."""
    if len(averages.maps) < 2:
        raise PreconditionError("need at least two average slices to diff")
    return [b.values - a.values
            for a, b in zip(averages.maps, averages.maps[1:])]


def saliency_time_histogram(fixations: list[Fixation],
                            gt_maps: dict[str, SaliencyMap],
                            bins_t: int = 50, bins_s: int = 50,
                            t_total: float = 5000.0) -> np.ndarray:
    """Counts of fixations by (time bin, saliency-at-fixation bin).

    Saliency is read from the image's max-normalized ground-truth map at
    the fixation's pixel; values at the very edge (t = T, s = 1) clamp
    into the last bin.
    """
    if bins_t < 1 or bins_s < 1:
        raise PreconditionError(f"invalid bin counts {bins_t}x{bins_s}")
    for image_id, m in gt_maps.items():
        if m.normalization is not Normalization.MAX_TO_ONE:
            raise PreconditionError(
                f"map {image_id!r} is {m.normalization.name}, need MAX_TO_ONE")
    grid = np.zeros((bins_t, bins_s), dtype=np.int64)
    for f in fixations:
        if f.t_ms is None:
            raise PreconditionError(
                f"fixation {f.observer_id!r}#{f.order_index} has no timestamp")
        if not 0.0 <= f.t_ms <= t_total:
            raise PreconditionError(
                f"timestamp {f.t_ms} outside [0, {t_total}]")
        m = gt_maps.get(f.image_id)
        if m is None:
            raise PreconditionError(f"no ground-truth map for {f.image_id!r}")
        rows, cols = fixation_pixels([f], m.width, m.height)
        s = m.values[rows[0], cols[0]]
        bt = min(int(f.t_ms / (t_total / bins_t)), bins_t - 1)
        bs = min(int(s / (1.0 / bins_s)), bins_s - 1)
        grid[bt, bs] += 1
    return grid


# ---------------------------------------------------------------------------
# Paired t test with a self-contained Student CDF
# ---------------------------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta
    (modified Lentz iteration)."""
    max_iter = 300
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: int) -> float:
    """Exact two-sided tail probability for Student's t."""
    if dof < 1:
        raise PreconditionError(f"degrees of freedom must be >= 1, got {dof}")
    return _reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t * t))


def normal_two_sided_p(t: float) -> float:
    return math.erfc(abs(t) / math.sqrt(2.0))


def paired_t_test(a: list[float], b: list[float]) -> TTestResult:
    """Two-sided paired t test on per-image scores.

    Exactly-equal inputs have no defined statistic and raise; a constant
    nonzero difference (zero variance, nonzero mean) is reported as the
    capped statistic with the overflow flag set. The p-value uses the
    exact Student CDF below 30 samples and the normal approximation at
    30 or more.
    """
    if len(a) != len(b):
        raise PreconditionError(f"length mismatch: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise PreconditionError(f"need at least 2 pairs, got {n}")
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mean = d.mean()
    sd = d.std(ddof=1)
    dof = n - 1
    if sd == 0.0:
        if mean == 0.0:
            raise ZeroVarianceError("all paired differences are zero")
        return TTestResult(t=math.copysign(T_CAP, mean), p=0.0, dof=dof,
                           overflow=True)
    t = float(mean / (sd / math.sqrt(n)))
    p = normal_two_sided_p(t) if n >= 30 else student_t_two_sided_p(t, dof)
    return TTestResult(t=t, p=p, dof=dof, overflow=False)


# ---------------------------------------------------------------------------
# CSV renderers for the analysis artifacts
# ---------------------------------------------------------------------------

def correlation_csv(matrix: SliceCorrelationMatrix) -> str:
    n = matrix.n
    lines = ["slice," + ",".join(f"t{k + 1}" for k in range(n)) + ",skipped_max"]
    for j in range(n):
        row = ",".join(repr(float(v)) for v in matrix.values[j])
        lines.append(f"t{j + 1},{row},{int(matrix.skipped[j].max())}")
    return "\n".join(lines) + "\n"


def deviation_csv(scores: DeviationScores) -> str:
    lines = ["slice,mean_cc_to_average,skipped"]
    for j, (s, k) in enumerate(zip(scores.scores, scores.skipped)):
        lines.append(f"t{j + 1},{s!r},{k}")
    return "\n".join(lines) + "\n"


def histogram_csv(grid: np.ndarray, t_total: float = 5000.0) -> str:
    bins_t, bins_s = grid.shape
    lines = ["time_bin_start_ms,saliency_bin_start," + "count"]
    dt = t_total / bins_t
    ds = 1.0 / bins_s
    for bt in range(bins_t):
        for bs in range(bins_s):
            lines.append(f"{bt * dt!r},{bs * ds!r},{int(grid[bt, bs])}")
    return "\n".join(lines) + "\n"

"""Gaze records, fixation timestamp recovery, temporal slicing, and
rasterization of fixations into saliency maps.

Records are small frozen dataclasses; every operation returns new
objects. File formats: gaze logs are JSON lines, fixations are CSV,
maps are a small binary container ("TSAL") plus PGM/PPM exports for
viewing.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import struct
from bisect import bisect_right
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    ConfigError,
    DegenerateMapError,
    FormatError,
    NonFiniteError,
    PreconditionError,
    UnrecoverableObserverError,
)
from .fileio import atomic_write_bytes

DEFAULT_T_TOTAL_MS = 5000.0
DEFAULT_SLICES = 5
DEFAULT_SPATIAL_WEIGHT = 1.0     # per pixel
DEFAULT_TEMPORAL_WEIGHT = 0.01   # per millisecond
NORM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GazeSample:
    """One raw gaze point from the tracker log."""
    image_id: str
    observer_id: str
    t_ms: float
    x: float
    y: float


@dataclass(frozen=True)
class Fixation:
    """A dwell point; t_ms is absent on ingest and set by recovery."""
    image_id: str
    observer_id: str
    order_index: int
    x: float
    y: float
    t_ms: float | None = None


class Scheme(enum.Enum):
    EQUAL_DURATION = "equal-duration"
    EQUAL_DISTRIBUTION = "equal-distribution"


class Normalization(enum.Enum):
    RAW = 0
    SUM_TO_ONE = 1
    MAX_TO_ONE = 2


@dataclass(frozen=True)
class TemporalSliceSet:
    image_id: str
    n: int
    scheme: Scheme
    slices: tuple[tuple[Fixation, ...], ...]
    boundaries_ms: tuple[float, ...] | None  # equal-duration only


@dataclass(frozen=True)
class SaliencyMap:
    """Dense nonnegative grid with a declared normalization state."""
    width: int
    height: int
    values: np.ndarray
    normalization: Normalization

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.height, self.width):
            raise PreconditionError(
                f"map values shape {v.shape} != (height={self.height}, "
                f"width={self.width})")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("map contains NaN or Inf")
        if v.min() < 0.0:
            raise PreconditionError("map values must be nonnegative")
        if self.normalization is Normalization.SUM_TO_ONE:
            if abs(v.sum() - 1.0) > NORM_TOLERANCE:
                raise PreconditionError(
                    f"sum-normalized map sums to {v.sum()!r}, not 1")
        elif self.normalization is Normalization.MAX_TO_ONE:
            if abs(v.max() - 1.0) > NORM_TOLERANCE:
                raise PreconditionError(
                    f"max-normalized map has max {v.max()!r}, not 1")
        v = v.copy()  # private buffer: caller mutation cannot reach the map
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def make_map(values, normalization: Normalization = Normalization.RAW
             ) -> SaliencyMap:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise PreconditionError(f"map values must be 2-D, got shape {v.shape}")
    return SaliencyMap(width=v.shape[1], height=v.shape[0], values=v,
                       normalization=normalization)


def normalize_map(m: SaliencyMap, mode: Normalization) -> SaliencyMap:
    """Renormalize a map; degenerate (all-zero) input cannot be
    normalized and raises."""
    if mode is Normalization.RAW:
        return make_map(m.values, Normalization.RAW)
    if mode is Normalization.SUM_TO_ONE:
        total = m.values.sum()
        if total <= 0.0:
            raise DegenerateMapError("cannot sum-normalize an all-zero map")
        return make_map(m.values / total, mode)
    peak = m.values.max()
    if peak <= 0.0:
        raise DegenerateMapError("cannot max-normalize an all-zero map")
    return make_map(m.values / peak, mode)


# ---------------------------------------------------------------------------
# Timestamp recovery
# ---------------------------------------------------------------------------

def recover_timestamps(fixations: list[Fixation], gaze: list[GazeSample],
                       w_s: float = DEFAULT_SPATIAL_WEIGHT,
                       w_t: float = DEFAULT_TEMPORAL_WEIGHT,
                       t_total: float = DEFAULT_T_TOTAL_MS) -> list[Fixation]:
    """Assign a timestamp to each fixation of one observer.

    Each fixation starts from the uniform prior t_hat = (i + 0.5) * T / M
    and takes the timestamp of the gaze sample minimizing
    w_s * spatial_distance + w_t * |gaze.t - t_hat|, earliest sample on
    ties. The result is then repaired to be non-decreasing by clamping
    each timestamp to its predecessor's.
    """
    if w_s < 0.0 or w_t < 0.0:
        raise ConfigError(f"weights must be nonnegative, got w_s={w_s} w_t={w_t}")
    if not fixations:
        return []
    if not gaze:
        raise UnrecoverableObserverError(
            f"observer {fixations[0].observer_id!r} has {len(fixations)} "
            f"fixations but no gaze samples")
    for a, b in zip(fixations, fixations[1:]):
        if b.order_index <= a.order_index:
            raise PreconditionError(
                f"fixations not ordered by order_index "
                f"({a.order_index} then {b.order_index})")

    gx = np.array([g.x for g in gaze])
    gy = np.array([g.y for g in gaze])
    gt = np.array([g.t_ms for g in gaze])
    m = len(fixations)
    out: list[Fixation] = []
    previous = -math.inf
    for i, fix in enumerate(fixations):
        prior = (i + 0.5) * t_total / m
        cost = w_s * np.hypot(gx - fix.x, gy - fix.y) + w_t * np.abs(gt - prior)
        best = cost.min()
        t = gt[cost == best].min()  # earliest gaze time among exact ties
        t = max(t, previous)
        previous = t
        out.append(replace(fix, t_ms=float(t)))
    return out


# ---------------------------------------------------------------------------
# Temporal slicing
# ---------------------------------------------------------------------------

def _slice_preconditions(fixations: list[Fixation], n: int) -> str:
    if n < 1:
        raise ConfigError(f"slice count must be >= 1, got {n}")
    image_ids = {f.image_id for f in fixations}
    if len(image_ids) > 1:
        raise PreconditionError(
            f"fixations from multiple images: {sorted(image_ids)}")
    for f in fixations:
        if f.t_ms is None:
            raise PreconditionError(
                f"fixation {f.observer_id!r}#{f.order_index} has no timestamp")
    return fixations[0].image_id if fixations else ""


def slice_equal_duration(fixations: list[Fixation], n: int = DEFAULT_SLICES,
                         t_total: float = DEFAULT_T_TOTAL_MS
                         ) -> TemporalSliceSet:
    """Partition by timestamp into n equal-length intervals.

    Bins are half-open [k*T/n, (k+1)*T/n) except the last, which is
    closed at T so a fixation exactly at the end of viewing is kept.
    """
    image_id = _slice_preconditions(fixations, n)
    if t_total <= 0.0:
        raise ConfigError(f"t_total must be positive, got {t_total}")
    boundaries = [k * t_total / n for k in range(n + 1)]
    for f in fixations:
        if not 0.0 <= f.t_ms <= t_total:
            raise PreconditionError(
                f"timestamp {f.t_ms} outside [0, {t_total}]")
    slices: list[list[Fixation]] = [[] for _ in range(n)]
    for f in fixations:
        k = min(bisect_right(boundaries, f.t_ms) - 1, n - 1)
        slices[k].append(f)
    return TemporalSliceSet(image_id=image_id, n=n,
                            scheme=Scheme.EQUAL_DURATION,
                            slices=tuple(tuple(s) for s in slices),
                            boundaries_ms=tuple(boundaries))


def slice_equal_distribution(fixations: list[Fixation],
                             n: int = DEFAULT_SLICES) -> TemporalSliceSet:
    """Partition into n groups of near-equal size, earliest first.

    Sort key is (t_ms, order_index) so duplicate timestamps split
    deterministically. With count = q*n + r the first r slices get
    q + 1 fixations.
    """
    image_id = _slice_preconditions(fixations, n)
    ordered = sorted(fixations, key=lambda f: (f.t_ms, f.order_index))
    q, r = divmod(len(ordered), n)
    slices: list[tuple[Fixation, ...]] = []
    start = 0
    for k in range(n):
        size = q + 1 if k < r else q
        slices.append(tuple(ordered[start:start + size]))
        start += size
    return TemporalSliceSet(image_id=image_id, n=n,
                            scheme=Scheme.EQUAL_DISTRIBUTION,
                            slices=tuple(slices), boundaries_ms=None)


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def default_sigma(width: int, height: int) -> float:
    # 19 px at 480-px frames, scaled with the short side
    return 19.0 * min(width, height) / 480.0

def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Truncated normalized Gaussian, radius ceil(3*sigma)."""
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return k / k.sum()


def rasterize(fixations: list[Fixation], width: int, height: int,
              sigma_px: float | None = None,
              normalization: Normalization = Normalization.RAW
              ) -> SaliencyMap:
    """Unit impulse at each fixation's nearest pixel, blurred with a
    separable truncated Gaussian (zero padding at borders)."""
    if width < 1 or height < 1:
        raise ConfigError(f"invalid map size {width}x{height}")
    if sigma_px is None:
        sigma_px = default_sigma(width, height)
    if sigma_px <= 0.0:
        raise ConfigError(f"sigma must be positive, got {sigma_px}")

    grid = np.zeros((height, width))
    for f in fixations:
        if not (0.0 <= f.x < width and 0.0 <= f.y < height):
            raise PreconditionError(
                f"fixation at ({f.x}, {f.y}) outside {width}x{height} image")
        px = min(int(math.floor(f.x + 0.5)), width - 1)
        py = min(int(math.floor(f.y + 0.5)), height - 1)
        grid[py, px] += 1.0

    if not fixations:
        if normalization is not Normalization.RAW:
            raise DegenerateMapError(
                "no fixations: cannot produce a normalized map")
        return make_map(grid, Normalization.RAW)

    kernel = gaussian_kernel_1d(sigma_px)
    blurred = np.empty_like(grid)
    for row in range(height):
        blurred[row] = np.convolve(grid[row], kernel, mode="same")
    for col in range(width):
        blurred[:, col] = np.convolve(blurred[:, col], kernel, mode="same")

    raw = make_map(blurred, Normalization.RAW)
    if normalization is Normalization.RAW:
        return raw
    return normalize_map(raw, normalization)


# ---------------------------------------------------------------------------
# Gaze log (JSON lines) and fixation CSV
# ---------------------------------------------------------------------------

def _require_number(record: dict, key: str, line_no: int) -> float:
    value = record.get(key)
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise FormatError(f"gaze line {line_no}: {key!r} missing or not a number")
    value = float(value)
    if not math.isfinite(value):
        raise FormatError(f"gaze line {line_no}: {key!r} is not finite")
    return value


def read_gaze_jsonl(path: str) -> list[GazeSample]:
    samples: list[GazeSample] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"gaze line {line_no}: invalid JSON") from exc
            if not isinstance(record, dict):
                raise FormatError(f"gaze line {line_no}: expected an object")
            for key in ("image_id", "observer_id"):
                if not isinstance(record.get(key), str):
                    raise FormatError(
                        f"gaze line {line_no}: {key!r} missing or not a string")
            samples.append(GazeSample(
                image_id=record["image_id"],
                observer_id=record["observer_id"],
                t_ms=_require_number(record, "t_ms", line_no),
                x=_require_number(record, "x", line_no),
                y=_require_number(record, "y", line_no)))
    return samples


def write_gaze_jsonl(path: str, samples: list[GazeSample]) -> None:
    buf = io.StringIO()
    for s in samples:
        json.dump({"image_id": s.image_id, "observer_id": s.observer_id,
                   "t_ms": s.t_ms, "x": s.x, "y": s.y}, buf)
        buf.write("\n")
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


_FIXATION_COLUMNS = ("image_id", "observer_id", "order_index", "x", "y")


def read_fixation_table(path: str
                        ) -> tuple[list[Fixation], list[int] | None]:
    """Read a fixation CSV. Returns (fixations, slice_index column or
    None). t_ms and slice_index columns are optional."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty fixation file")
        missing = [c for c in _FIXATION_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}")
        has_t = "t_ms" in reader.fieldnames
        has_slice = "slice_index" in reader.fieldnames
        fixations: list[Fixation] = []
        slice_indices: list[int] = []
        for line_no, row in enumerate(reader, start=2):
            try:
                t_raw = row.get("t_ms", "") if has_t else ""
                fixations.append(Fixation(
                    image_id=row["image_id"],
                    observer_id=row["observer_id"],
                    order_index=int(row["order_index"]),
                    x=float(row["x"]),
                    y=float(row["y"]),
                    t_ms=float(t_raw) if t_raw not in ("", None) else None))
                if has_slice:
                    slice_indices.append(int(row["slice_index"]))
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path} line {line_no}: bad value "
                                  f"({exc})") from exc
    return fixations, slice_indices if has_slice else None


def read_fixations_csv(path: str) -> list[Fixation]:
    fixations, _ = read_fixation_table(path)
    return fixations


def write_fixations_csv(path: str, fixations: list[Fixation],
                        slice_indices: list[int] | None = None) -> None:
    if slice_indices is not None and len(slice_indices) != len(fixations):
        raise PreconditionError(
            f"{len(slice_indices)} slice indices for {len(fixations)} fixations")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(_FIXATION_COLUMNS) + ["t_ms"]
    if slice_indices is not None:
        header.append("slice_index")
    writer.writerow(header)
    for i, f in enumerate(fixations):
        row = [f.image_id, f.observer_id, f.order_index,
               repr(f.x), repr(f.y),
               "" if f.t_ms is None else repr(f.t_ms)]
        if slice_indices is not None:
            row.append(slice_indices[i])
        writer.writerow(row)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# Map container ("TSAL") and viewing exports
# ---------------------------------------------------------------------------

_MAP_MAGIC = b"TSAL"


def serialize_map(values: np.ndarray, normalization: Normalization) -> bytes:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise PreconditionError(f"map payload must be 2-D, got {v.shape}")
    header = _MAP_MAGIC + struct.pack("<IIB", v.shape[1], v.shape[0],
                                      normalization.value)
    return header + v.astype("<f4").tobytes()


def deserialize_map(blob: bytes) -> tuple[np.ndarray, Normalization]:
    if blob[:4] != _MAP_MAGIC:
        raise FormatError("not a TSAL map (bad magic)")
    if len(blob) < 13:
        raise FormatError("truncated TSAL header")
    width, height, code = struct.unpack_from("<IIB", blob, 4)
    try:
        normalization = Normalization(code)
    except ValueError as exc:
        raise FormatError(f"unknown normalization code {code}") from exc
    expected = 13 + 4 * width * height
    if len(blob) != expected:
        raise FormatError(f"TSAL payload is {len(blob)} bytes, "
                          f"expected {expected}")
    values = np.frombuffer(blob, dtype="<f4", offset=13).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("TSAL payload contains NaN or Inf")
    return values.reshape(height, width), normalization


def write_map_tsal(path: str, m: SaliencyMap) -> None:
    atomic_write_bytes(path, serialize_map(m.values, m.normalization))


def write_signed_tsal(path: str, values: np.ndarray) -> None:
    """Container for signed data (difference maps); always Raw."""
    atomic_write_bytes(path, serialize_map(values, Normalization.RAW))


def read_raw_tsal(path: str) -> tuple[np.ndarray, Normalization]:
    with open(path, "rb") as fh:
        return deserialize_map(fh.read())


def read_map_tsal(path: str) -> SaliencyMap:
    """Read a saliency map. The f32 payload cannot carry the 1e-9
    normalization invariant exactly, so declared Sum/Max maps are
    renormalized after decoding."""
    values, normalization = read_raw_tsal(path)
    if values.min() < 0.0:
        raise PreconditionError(f"{path}: saliency map has negative values")
    raw = make_map(values, Normalization.RAW)
    if normalization is Normalization.RAW:
        return raw
    return normalize_map(raw, normalization)


def write_map_pgm(path: str, m: SaliencyMap) -> None:
    """16-bit max-scaled PGM (P5, big-endian samples per the format)."""
    peak = m.values.max()
    if peak > 0.0:
        scaled = np.round(m.values / peak * 65535.0).astype(">u2")
    else:
        scaled = np.zeros_like(m.values, dtype=">u2")
    header = f"P5\n{m.width} {m.height}\n65535\n".encode("ascii")
    atomic_write_bytes(path, header + scaled.tobytes())


def write_diff_ppm(path: str, diff: np.ndarray) -> None:
    """8-bit PPM with a diverging ramp: positive red, negative blue,
    zero white. Scaled symmetrically by the largest magnitude."""
    d = np.asarray(diff, dtype=np.float64)
    if d.ndim != 2:
        raise PreconditionError(f"difference map must be 2-D, got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise NonFiniteError("difference map contains NaN or Inf")
    scale = np.abs(d).max()
    t = d / scale if scale > 0.0 else np.zeros_like(d)
    fade = np.round(255.0 * (1.0 - np.abs(t))).astype(np.uint8)
    full = np.full_like(fade, 255)
    rgb = np.where((t >= 0)[..., None],
                   np.stack([full, fade, fade], axis=-1),
                   np.stack([fade, fade, full], axis=-1))
    header = f"P6\n{d.shape[1]} {d.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + rgb.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Grouping helpers
# ---------------------------------------------------------------------------

def group_gaze(samples: list[GazeSample]
               ) -> dict[tuple[str, str], list[GazeSample]]:
    groups: dict[tuple[str, str], list[GazeSample]] = {}
    for s in samples:
        groups.setdefault((s.image_id, s.observer_id), []).append(s)
    return groups


def group_fixations(fixations: list[Fixation]
                    ) -> dict[tuple[str, str], list[Fixation]]:
    groups: dict[tuple[str, str], list[Fixation]] = {}
    for f in fixations:
        groups.setdefault((f.image_id, f.observer_id), []).append(f)
    return groups

"""Batch command-line pipeline.

Subcommands chain into each other through plain files:

    synth      scene JSON -> images/, gaze.jsonl, fixations.csv, truth/
    timestamps gaze + untimestamped fixations -> timestamped CSV
    slice      timestamped CSV -> CSV with a slice_index column
    rasterize  sliced CSV + images -> maps/full/, maps/t<k>/
    analyze    maps + sliced CSV -> correlation/deviation/histogram CSVs,
               average and difference maps
    train      images + maps -> TSPW checkpoint (+ loss CSV)
    predict    checkpoint + images -> pred/s_r/, pred/s_i/, pred/t<k>/
    tsal-eval  predictions vs ground truth + fixations -> metric CSV

Exit codes: 0 success, 2 bad input or configuration, 3 numerically
degenerate data. Errors print one line to stderr. Settings resolve as
CLI flag, then key=value config file (--config), then built-in default.
The only environment variable honored is TSAL_CACHE_DIR (scene render
cache location).
"""

from __future__ import annotations

import argparse
import functools
import hashlib
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, metrics, model, synth
from .autodiff import load_params, save_params
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateMapError,
    FormatError,
    GraphError,
    NonFiniteError,
    PreconditionError,
    ShapeMismatchError,
    UnrecoverableObserverError,
    ZeroVarianceError,
)
from .fileio import atomic_write_bytes, atomic_write_text
from .gaze import (
    Fixation,
    Normalization,
    group_gaze,
    make_map,
    normalize_map,
    rasterize,
    read_fixation_table,
    read_gaze_jsonl,
    read_map_tsal,
    recover_timestamps,
    slice_equal_distribution,
    slice_equal_duration,
    write_diff_ppm,
    write_fixations_csv,
    write_gaze_jsonl,
    write_map_pgm,
    write_map_tsal,
    write_signed_tsal,
)

INPUT_ERRORS = (ConfigError, FormatError, PreconditionError,
                ShapeMismatchError, UnrecoverableObserverError,
                CheckpointError, GraphError, OSError)
DEGENERATE_ERRORS = (DegenerateMapError, ZeroVarianceError, NonFiniteError)

NORMALIZATION_NAMES = {"raw": Normalization.RAW,
                       "sum": Normalization.SUM_TO_ONE,
                       "max": Normalization.MAX_TO_ONE}


# ---------------------------------------------------------------------------
# Option resolution: flag > config file > default
# ---------------------------------------------------------------------------

class _Options:
    """Registry of config-file-overridable options for one subcommand."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.registry: dict[str, tuple] = {}
        parser.add_argument("--config", metavar="FILE",
                            help="key=value settings file")

    def add(self, flag: str, convert, default, help: str,
            choices: tuple | None = None):
        dest = flag.lstrip("-").replace("-", "_")
        shown = default if choices is None else f"{default}"
        self.parser.add_argument(
            flag, type=convert, default=None, dest=dest,
            choices=choices, help=f"{help} (default: {shown})")
        self.registry[dest] = (convert, default, choices)

    def resolve(self, args: argparse.Namespace) -> None:
        cfg = _read_config_file(args.config) if args.config else {}
        unknown = sorted(set(cfg) - set(self.registry))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for dest, (convert, default, choices) in self.registry.items():
            value = getattr(args, dest)
            if value is None and dest in cfg:
                try:
                    value = convert(cfg[dest])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(
                        f"config key {dest}: {exc}") from exc
                if choices is not None and value not in choices:
                    raise ConfigError(
                        f"config key {dest}: {value!r} not one of {choices}")
            if value is None:
                value = default
            setattr(args, dest, value)


def _read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def cache_dir() -> Path:
    """Scene render cache location; TSAL_CACHE_DIR overrides the default
    and is the only environment variable this tool reads."""
    override = os.environ.get("TSAL_CACHE_DIR")
    return Path(override) if override else Path.home() / ".cache" / "tsal"


# ---------------------------------------------------------------------------
# Small IO helpers
# ---------------------------------------------------------------------------

def _save_npy(path: Path, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, arr)
    atomic_write_bytes(path, buf.getvalue())


def _load_image(path: Path) -> np.ndarray:
    try:
        arr = np.load(path)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise FormatError(
            f"{path}: expected a (3, H, W) array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: image contains non-finite values")
    return arr.astype(np.float64)


def _image_ids(images_dir: str) -> list[str]:
    try:
        names = sorted(f for f in os.listdir(images_dir)
                       if f.endswith(".npy"))
    except OSError as exc:
        raise FormatError(
            f"cannot list image directory {images_dir}: {exc}") from exc
    if not names:
        raise PreconditionError(f"no .npy images in {images_dir}")
    return [n[:-4] for n in names]


def _map_path(maps_dir, kind: str, image_id: str) -> Path:
    return Path(maps_dir) / kind / f"{image_id}.tsal"


def _write_map(maps_dir, kind: str, image_id: str, m) -> None:
    path = _map_path(maps_dir, kind, image_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_map_tsal(path, m)


def _read_map(maps_dir, kind: str, image_id: str):
    path = _map_path(maps_dir, kind, image_id)
    if not path.exists():
        raise PreconditionError(f"missing map {path}")
    return read_map_tsal(path)


def _slice_kinds(maps_dir: str) -> list[str]:
    kinds = []
    k = 0
    while (Path(maps_dir) / f"t{k}").is_dir():
        kinds.append(f"t{k}")
        k += 1
    if len(kinds) < 1:
        raise PreconditionError(
            f"{maps_dir} has no t0/ slice directory; run rasterize first")
    return kinds


def _run_parallel(jobs: int, fn, items: list):
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _require_timestamps(fixations: list[Fixation], path) -> None:
    if any(f.t_ms is None for f in fixations):
        raise FormatError(
            f"{path} has rows without t_ms; run the timestamps step first")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _scene_specs(scene_data: dict) -> list[synth.SceneSpec]:
    if "scenes" in scene_data:
        specs = [synth.scene_from_dict(d) for d in scene_data["scenes"]]
        if not specs:
            raise FormatError("scene file lists no scenes")
        if len({s.n_slices for s in specs}) != 1:
            raise FormatError("scenes disagree on slice count")
        return specs
    preset = scene_data.get("preset")
    if preset != "drift":
        raise FormatError(
            "scene file needs either a \"scenes\" list or preset=\"drift\"")
    try:
        images = int(scene_data.get("images", 20))
        width = int(scene_data.get("width", 64))
        height = int(scene_data.get("height", 64))
        objects = int(scene_data.get("objects", 5))
        slices = int(scene_data.get("slices", 5))
        bias = float(scene_data.get("center_bias_strength", 0.05))
        spread = float(scene_data.get("spread", 0.8))
        anchor = scene_data.get("anchor")
        if anchor is not None:
            anchor = (float(anchor[0]), float(anchor[1]))
        seed = int(scene_data.get("scene_seed", 0))
    except (TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"bad drift preset settings: {exc}") from exc
    if images < 1:
        raise FormatError("preset needs images >= 1")
    rng = np.random.default_rng(seed)
    return [synth.drift_spec(rng, width, height, n_objects=objects,
                             n_slices=slices, anchor=anchor, spread=spread,
                             center_bias_strength=bias)
            for _ in range(images)]


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _generate_scene_cached(spec: synth.SceneSpec, seed: int) -> synth.Scene:
    """generate_scene with an on-disk cache keyed by spec and seed.

    The cache only ever skips recomputation; anything unreadable or
    misshapen is regenerated, and cache write failures are ignored.
    """
    key = hashlib.sha256(
        json.dumps([synth.scene_to_dict(spec), seed],
                   sort_keys=True).encode()).hexdigest()
    path = cache_dir() / f"scene-{key}.npz"
    if path.exists():
        try:
            with np.load(path) as z:
                scene = _scene_from_npz(spec, z)
            if scene is not None:
                return scene
        except (OSError, ValueError, KeyError):
            pass
    scene = synth.generate_scene(spec, seed)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        buf = io.BytesIO()
        np.savez(buf, image=scene.image,
                 maps=np.stack([m.values for m in scene.slice_maps]),
                 centers=scene.mixture.centers, sigmas=scene.mixture.sigmas,
                 weights=scene.mixture.weights,
                 center_index=np.array(
                     -1 if scene.mixture.center_index is None
                     else scene.mixture.center_index))
        atomic_write_bytes(path, buf.getvalue())
    except OSError:
        pass
    return scene


def _scene_from_npz(spec: synth.SceneSpec, z) -> synth.Scene | None:
    image = z["image"]
    maps = z["maps"]
    if image.shape != (3, spec.height, spec.width) or \
            maps.shape[0] != spec.n_slices:
        return None
    ci = int(z["center_index"])
    mixture = synth.SliceMixture(
        spec.width, spec.height, z["centers"], z["sigmas"], z["weights"],
        None if ci < 0 else ci)
    slice_maps = tuple(make_map(m, Normalization.SUM_TO_ONE)
                       for m in maps)
    return synth.Scene(spec, image, slice_maps, mixture)


def _synth_one(item, out_dir: str, seed: int, observers: int,
               samples_per_sec: int, fixation_rate: float, rho: float,
               jitter: float, t_total: float):
    index, spec = item
    image_id = f"img{index:03d}"
    scene = _generate_scene_cached(spec, _derived_seed(seed, index, 0))
    sampled = synth.sample_observers(
        scene.mixture, observers, samples_per_sec, fixation_rate,
        seed=_derived_seed(seed, index, 1), image_id=image_id, rho=rho,
        t_total_ms=t_total, jitter_px=jitter)
    out = Path(out_dir)
    _save_npy(out / "images" / f"{image_id}.npy", scene.image)
    for k, m in enumerate(sampled.slice_maps):
        _write_map(out / "truth" / "maps", f"t{k}", image_id, m)
    _write_map(out / "truth" / "maps", "full", image_id, sampled.full_map)
    return image_id, sampled


def cmd_synth(args) -> None:
    scene_data = synth.read_scene_file(args.scene)
    specs = _scene_specs(scene_data)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    worker = functools.partial(
        _synth_one, out_dir=args.out, seed=args.seed,
        observers=args.observers, samples_per_sec=args.samples_per_sec,
        fixation_rate=args.fixation_rate, rho=args.rho, jitter=args.jitter,
        t_total=args.t_total)
    results = _run_parallel(args.jobs, worker, list(enumerate(specs)))

    gaze, fixations, truth_fix, truth_slices = [], [], [], []
    for image_id, sampled in results:
        gaze.extend(sampled.gaze)
        fixations.extend(sampled.fixations)
        for f, t, k in zip(sampled.fixations, sampled.true_t_ms,
                           sampled.true_slices):
            truth_fix.append(Fixation(f.image_id, f.observer_id,
                                      f.order_index, f.x, f.y, t_ms=t))
            truth_slices.append(k)
    write_gaze_jsonl(out / "gaze.jsonl", gaze)
    write_fixations_csv(out / "fixations.csv", fixations)
    (out / "truth").mkdir(exist_ok=True)
    write_fixations_csv(out / "truth" / "fixations.csv", truth_fix,
                        slice_indices=truth_slices)
    print(f"synthesized {len(specs)} images, {len(fixations)} fixations, "
          f"{len(gaze)} gaze samples")


# ---------------------------------------------------------------------------
# timestamps / slice
# ---------------------------------------------------------------------------

def cmd_timestamps(args) -> None:
    gaze = read_gaze_jsonl(args.gaze)
    fixations, _ = read_fixation_table(args.fixations)
    if not fixations:
        raise PreconditionError(f"{args.fixations} has no fixation rows")
    gaze_groups = group_gaze(gaze)
    positions: dict[tuple, list[int]] = {}
    for i, f in enumerate(fixations):
        positions.setdefault((f.image_id, f.observer_id), []).append(i)
    recovered: list[Fixation | None] = [None] * len(fixations)
    for key, idxs in positions.items():
        if key not in gaze_groups:
            raise UnrecoverableObserverError(
                f"observer {key[1]!r} on image {key[0]!r} has fixations "
                f"but no gaze samples")
        result = recover_timestamps([fixations[i] for i in idxs],
                                    gaze_groups[key],
                                    w_s=args.spatial_weight,
                                    w_t=args.temporal_weight,
                                    t_total=args.t_total)
        for i, f in zip(idxs, result):
            recovered[i] = f
    write_fixations_csv(args.out, recovered)
    print(f"recovered timestamps for {len(recovered)} fixations")


def cmd_slice(args) -> None:
    fixations, _ = read_fixation_table(args.fixations)
    if not fixations:
        raise PreconditionError(f"{args.fixations} has no fixation rows")
    _require_timestamps(fixations, args.fixations)
    positions: dict[str, list[int]] = {}
    for i, f in enumerate(fixations):
        positions.setdefault(f.image_id, []).append(i)
    slice_of: dict[int, int] = {}
    for image_id, idxs in positions.items():
        group = [fixations[i] for i in idxs]
        if args.scheme == "equal-duration":
            sliced = slice_equal_duration(group, n=args.n,
                                          t_total=args.t_total)
        else:
            sliced = slice_equal_distribution(group, n=args.n)
        for k, members in enumerate(sliced.slices):
            for f in members:
                slice_of[id(f)] = k
    write_fixations_csv(args.out, fixations,
                        slice_indices=[slice_of[id(f)] for f in fixations])
    print(f"sliced {len(fixations)} fixations into {args.n} bins "
          f"({args.scheme})")


# ---------------------------------------------------------------------------
# rasterize
# ---------------------------------------------------------------------------

def _rasterize_one(item, out_dir: str, n: int, sigma: float | None,
                   norm_name: str):
    image_id, (width, height), rows = item
    norm = NORMALIZATION_NAMES[norm_name]
    by_slice: list[list[Fixation]] = [[] for _ in range(n)]
    for f, k in rows:
        by_slice[k].append(f)
    for k in range(n):
        m = rasterize(by_slice[k], width, height, sigma_px=sigma,
                      normalization=norm)
        _write_map(out_dir, f"t{k}", image_id, m)
    full = rasterize([f for f, _ in rows], width, height, sigma_px=sigma,
                     normalization=norm)
    _write_map(out_dir, "full", image_id, full)
    return image_id


def cmd_rasterize(args) -> None:
    fixations, slice_indices = read_fixation_table(args.fixations)
    if slice_indices is None:
        raise FormatError(
            f"{args.fixations} has no slice_index column; run slice first")
    bad = [k for k in slice_indices if not 0 <= k < args.n]
    if bad:
        raise PreconditionError(
            f"slice index {bad[0]} out of range for n={args.n}")
    ids = _image_ids(args.images)
    dims = {}
    for image_id in ids:
        arr = _load_image(Path(args.images) / f"{image_id}.npy")
        dims[image_id] = (arr.shape[2], arr.shape[1])
    rows: dict[str, list] = {image_id: [] for image_id in ids}
    for f, k in zip(fixations, slice_indices):
        if f.image_id not in rows:
            raise PreconditionError(
                f"fixation references unknown image {f.image_id!r}")
        rows[f.image_id].append((f, k))
    worker = functools.partial(_rasterize_one, out_dir=args.out, n=args.n,
                               sigma=args.sigma, norm_name=args.normalize)
    items = [(image_id, dims[image_id], rows[image_id]) for image_id in ids]
    _run_parallel(args.jobs, worker, items)
    print(f"rasterized {len(ids)} images x {args.n} slices -> {args.out}")


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def cmd_analyze(args) -> None:
    kinds = _slice_kinds(args.maps)
    t0_dir = Path(args.maps) / "t0"
    ids = sorted(p.stem for p in t0_dir.glob("*.tsal"))
    if not ids:
        raise PreconditionError(f"no maps in {t0_dir}")
    dataset = {image_id: [_read_map(args.maps, kind, image_id)
                          for kind in kinds]
               for image_id in ids}

    out = Path(args.out)
    averages = analysis.average_slices(dataset)
    (out / "average").mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(averages.maps):
        write_map_tsal(out / "average" / f"t{k}.tsal", m)
        write_map_pgm(out / "average" / f"t{k}.pgm", m)

    corr = analysis.inter_slice_cc(dataset)
    atomic_write_text(out / "correlation.csv", analysis.correlation_csv(corr))
    dev = analysis.intra_slice_deviation(dataset, averages)
    atomic_write_text(out / "deviation.csv", analysis.deviation_csv(dev))

    if len(kinds) >= 2:
        (out / "diff").mkdir(exist_ok=True)
        for k, d in enumerate(analysis.consecutive_differences(averages)):
            write_signed_tsal(out / "diff" / f"d{k}.tsal", d)
            write_diff_ppm(out / "diff" / f"d{k}.ppm", d)

    fixations, _ = read_fixation_table(args.fixations)
    _require_timestamps(fixations, args.fixations)
    unknown = {f.image_id for f in fixations} - set(ids)
    if unknown:
        raise PreconditionError(
            f"fixations reference images without maps: {sorted(unknown)[0]}")
    gt_maps = {image_id: normalize_map(_read_map(args.maps, "full", image_id),
                                       Normalization.MAX_TO_ONE)
               for image_id in ids}
    grid = analysis.saliency_time_histogram(fixations, gt_maps,
                                            t_total=args.t_total)
    atomic_write_text(out / "histogram.csv",
                      analysis.histogram_csv(grid, t_total=args.t_total))
    print(f"analyzed {len(ids)} images x {len(kinds)} slices -> {args.out}")


# ---------------------------------------------------------------------------
# train / predict / eval
# ---------------------------------------------------------------------------

def _load_train_data(images_dir: str, maps_dir: str
                     ) -> tuple[list[str], model.TrainData]:
    ids = _image_ids(images_dir)
    kinds = _slice_kinds(maps_dir)
    images = []
    for image_id in ids:
        images.append(_load_image(Path(images_dir) / f"{image_id}.npy"))
    shapes = {arr.shape for arr in images}
    if len(shapes) != 1:
        raise PreconditionError(
            f"images disagree on shape: {sorted(shapes)}")
    gt_slices, gt_full = [], []
    for image_id in ids:
        gt_slices.append(np.stack(
            [_read_map(maps_dir, kind, image_id).values for kind in kinds]))
        gt_full.append(_read_map(maps_dir, "full", image_id).values[None])
    return ids, model.TrainData(np.stack(images), np.stack(gt_slices),
                                np.stack(gt_full))


def cmd_train(args) -> None:
    ids, data = _load_train_data(args.images, args.maps)
    n = data.gt_slices.shape[1]
    schedule = model.TrainSchedule(
        stage=args.stage, batch_size=args.batch_size, lr0=args.lr,
        decay_factor=args.decay_factor, decay_every=args.decay_every,
        epochs=args.epochs, max_steps=args.max_steps)
    loss_cfg = model.LossConfig(lambda1=args.lambda1, beta1=args.beta1,
                                lambda2=args.lambda2, beta2=args.beta2)
    if args.stage == "mixing":
        if not args.base:
            raise ConfigError("--base checkpoint is required for "
                              "the mixing stage")
        base = load_params(args.base)
        params, trace = model.train(data, schedule, seed=args.seed,
                                    loss_cfg=loss_cfg, base_params=base)
    else:
        base = load_params(args.base) if args.base else None
        config = model.ModelConfig(n_slices=n) if base is None else None
        params, trace = model.train(data, schedule, seed=args.seed,
                                    loss_cfg=loss_cfg, config=config,
                                    base_params=base)
    save_params(args.out, params)
    if args.loss_csv:
        atomic_write_text(args.loss_csv, model.loss_trace_csv(trace))
    final = trace[-1][2] if trace else float("nan")
    print(f"trained stage={args.stage} on {len(ids)} images, "
          f"final loss {final:.6f} -> {args.out}")


def _predict_one(image_id: str, images_dir: str, out_dir: str,
                 params: dict) -> str:
    arr = _load_image(Path(images_dir) / f"{image_id}.npy")
    pred = model.predict(arr[None], params)
    refined = make_map(pred["S_R"][0, 0])
    _write_map(out_dir, "s_r", image_id, refined)
    pgm = _map_path(out_dir, "s_r", image_id).with_suffix(".pgm")
    write_map_pgm(pgm, refined)
    _write_map(out_dir, "s_i", image_id, make_map(pred["S_I"][0, 0]))
    for k in range(pred["T"].shape[1]):
        _write_map(out_dir, f"t{k}", image_id,
                   make_map(pred["T"][0, k]))
    return image_id


def cmd_predict(args) -> None:
    params = load_params(args.checkpoint)
    model.check_params(params, model.infer_config(params))
    ids = _image_ids(args.images)
    worker = functools.partial(_predict_one, images_dir=args.images,
                               out_dir=args.out, params=params)
    _run_parallel(args.jobs, worker, ids)
    print(f"predicted {len(ids)} images -> {args.out}")


def cmd_eval(args) -> None:
    fixations, _ = read_fixation_table(args.fixations)
    ids, rows = metrics.evaluate_directories(args.pred, args.gt, fixations,
                                             seed=args.seed)
    atomic_write_text(args.out, metrics.metrics_csv(ids, rows))
    print(f"evaluated {len(ids)} images -> {args.out}")


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, _Options]]:
    parser = argparse.ArgumentParser(
        prog="tsal",
        description="Temporal saliency pipeline over plain files.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    options: dict[str, _Options] = {}

    def command(name, handler, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=handler)
        opts = _Options(p)
        options[name] = opts
        return p, opts

    p, o = command("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--out", required=True, help="dataset directory")
    o.add("--seed", int, 0, "master seed")
    o.add("--observers", int, 4, "observers per image")
    o.add("--samples-per-sec", int, 30, "gaze sampling rate")
    o.add("--fixation-rate", float, 3.0, "fixations per second")
    o.add("--rho", float, synth.DEFAULT_RHO, "revisit decay factor")
    o.add("--jitter", float, synth.DEFAULT_JITTER_PX,
          "gaze jitter around fixations, pixels")
    o.add("--t-total", float, 5000.0, "viewing duration, ms")
    o.add("--jobs", int, 1, "parallel workers")

    p, o = command("timestamps", cmd_timestamps,
                   "recover fixation timestamps from gaze data")
    p.add_argument("--gaze", required=True, help="gaze JSONL file")
    p.add_argument("--fixations", required=True, help="fixation CSV file")
    p.add_argument("--out", required=True, help="output fixation CSV")
    o.add("--spatial-weight", float, 1.0, "spatial match weight")
    o.add("--temporal-weight", float, 0.01, "temporal prior weight")
    o.add("--t-total", float, 5000.0, "viewing duration, ms")

    p, o = command("slice", cmd_slice, "assign fixations to time slices")
    p.add_argument("--fixations", required=True,
                   help="timestamped fixation CSV")
    p.add_argument("--out", required=True, help="output fixation CSV")
    o.add("--scheme", str, "equal-duration", "slicing scheme",
          choices=("equal-duration", "equal-distribution"))
    o.add("--n", int, 5, "number of slices")
    o.add("--t-total", float, 5000.0, "viewing duration, ms")

    p, o = command("rasterize", cmd_rasterize,
                   "render fixations into saliency maps")
    p.add_argument("--fixations", required=True, help="sliced fixation CSV")
    p.add_argument("--images", required=True,
                   help="image directory (provides map dimensions)")
    p.add_argument("--out", required=True, help="map directory")
    o.add("--n", int, 5, "number of slices")
    o.add("--sigma", float, None, "blur sigma in pixels (default: 19/480 "
          "of the short side)")
    o.add("--normalize", str, "raw", "stored normalization",
          choices=tuple(NORMALIZATION_NAMES))
    o.add("--jobs", int, 1, "parallel workers")

    p, o = command("analyze", cmd_analyze,
                   "slice correlation, deviation, averages, histogram")
    p.add_argument("--maps", required=True, help="map directory")
    p.add_argument("--fixations", required=True,
                   help="timestamped fixation CSV")
    p.add_argument("--out", required=True, help="analysis output directory")
    o.add("--t-total", float, 5000.0, "viewing duration, ms")

    p, o = command("train", cmd_train, "fit the saliency network")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--maps", required=True, help="ground-truth map directory")
    p.add_argument("--out", required=True, help="output checkpoint (TSPW)")
    p.add_argument("--base", help="starting checkpoint "
                   "(required for --stage mixing)")
    p.add_argument("--loss-csv", help="write per-epoch losses here")
    o.add("--stage", str, "temporal", "training stage",
          choices=("temporal", "mixing"))
    o.add("--seed", int, 0, "init and batch-order seed")
    o.add("--epochs", int, 10, "training epochs")
    o.add("--lr", float, 1e-4, "initial learning rate")
    o.add("--batch-size", int, 4, "images per step")
    o.add("--decay-factor", float, 0.1, "lr multiplier at each decay")
    o.add("--decay-every", int, 2, "epochs between lr decays")
    o.add("--max-steps", int, None, "hard cap on optimizer steps")
    o.add("--lambda1", float, 1.0, "stage-1 correlation weight")
    o.add("--beta1", float, 1.0, "stage-1 divergence weight")
    o.add("--lambda2", float, 1.0, "stage-2 correlation weight")
    o.add("--beta2", float, 1.0, "stage-2 divergence weight")

    p, o = command("predict", cmd_predict, "run a checkpoint over images")
    p.add_argument("--checkpoint", required=True, help="TSPW checkpoint")
    p.add_argument("--images", required=True, help="image directory")
    p.add_argument("--out", required=True, help="prediction map directory")
    o.add("--jobs", int, 1, "parallel workers")

    p, o = command("eval", cmd_eval, "score predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction map directory")
    p.add_argument("--gt", required=True, help="ground-truth map directory")
    p.add_argument("--fixations", required=True, help="fixation CSV")
    p.add_argument("--out", required=True, help="output metric CSV")
    o.add("--seed", int, 0, "negative-set subsampling seed")

    return parser, options


def main(argv=None) -> int:
    parser, options = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("tsal: ConfigError: no subcommand given", file=sys.stderr)
        return 2
    try:
        options[args.command].resolve(args)
        args.func(args)
    except DEGENERATE_ERRORS as exc:
        _print_error(exc)
        return 3
    except INPUT_ERRORS as exc:
        _print_error(exc)
        return 2
    return 0


def _print_error(exc: BaseException) -> None:
    message = " ".join(str(exc).split())
    print(f"tsal: {type(exc).__name__}: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())

"""Temporal saliency network: shared encoder, a temporal decoder that
predicts one map per time slice, an image decoder for the whole-viewing
map, and a mixing module that fuses everything into one refined map.

Desk-scale by default (64x64 inputs, tiny channel counts); every width
is configurable so gradient checks can run on much smaller instances.
Training is a plain two-stage loop: stage one fits encoder + decoders,
stage two freezes those and fits only the mixing module.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateMapError,
    PreconditionError,
    ShapeMismatchError,
)
from .metrics import cc_loss_node, kl_loss_node


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    enc_channels: tuple[int, ...] = (8, 16, 24, 32, 40)
    dec_channels: tuple[int, ...] = (32, 24, 16, 12)   # trunk convs, deep to shallow
    head_hidden: int = 16
    smm_channels: tuple[int, ...] = (32, 24, 16, 16)   # mixing convs, deep to shallow
    n_slices: int = 5

    def __post_init__(self):
        if len(self.enc_channels) != 5:
            raise ConfigError("encoder needs exactly 5 blocks")
        if len(self.dec_channels) != 4 or len(self.smm_channels) != 4:
            raise ConfigError("decoder and mixing trunks need exactly 4 convs")
        if self.n_slices < 1 or self.in_channels < 1 or self.head_hidden < 1:
            raise ConfigError("channel and slice counts must be positive")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 1.0
    beta1: float = 1.0
    lambda2: float = 1.0
    beta2: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "beta1", "lambda2", "beta2"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.lambda1 == 0.0 and self.beta1 == 0.0:
            raise ConfigError("stage 1 needs lambda1 or beta1 positive")
        if self.lambda2 == 0.0 and self.beta2 == 0.0:
            raise ConfigError("stage 2 needs lambda2 or beta2 positive")


@dataclass(frozen=True)
class TrainSchedule:
    stage: str                      # "temporal" or "mixing"
    batch_size: int = 4             # paper-scale value is 32
    lr0: float = 1e-4
    decay_factor: float = 0.1
    decay_every: int = 2            # epochs between decays
    epochs: int = 10
    max_steps: int | None = None    # optional hard cap for harnesses

    def __post_init__(self):
        if self.stage not in ("temporal", "mixing"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1:
            raise ConfigError("batch size, epochs, decay interval must be >= 1")
        if self.lr0 <= 0.0 or not 0.0 < self.decay_factor <= 1.0:
            raise ConfigError("need lr0 > 0 and decay factor in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr0 * self.decay_factor ** (epoch // self.decay_every)


@dataclass(frozen=True)
class TrainData:
    images: np.ndarray       # (N, C, H, W)
    gt_slices: np.ndarray    # (N, n, H, W), each channel sums to 1
    gt_full: np.ndarray      # (N, 1, H, W), sums to 1


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _conv_shapes(config: ModelConfig) -> list[tuple[str, int, int]]:
    """(name, out_channels, in_channels) for every conv, in init order."""
    c = config
    e1, e2, e3, e4, e5 = c.enc_channels
    d4, d3, d2, d1 = c.dec_channels
    s4, s3, s2, s1 = c.smm_channels
    n = c.n_slices
    shapes = [
        ("enc.c1", e1, c.in_channels), ("enc.c2", e2, e1),
        ("enc.c3", e3, e2), ("enc.c4", e4, e3), ("enc.c5", e5, e4),
    ]
    for prefix, out_last in (("tdec", n), ("idec", 1)):
        shapes += [
            (f"{prefix}.d4", d4, e5),
            (f"{prefix}.d3", d3, d4 + e4),
            (f"{prefix}.d2", d2, d3 + e3),
            (f"{prefix}.d1", d1, d2 + e2),
            (f"{prefix}.h1", c.head_hidden, d1 + e1),
            (f"{prefix}.h2", out_last, c.head_hidden),
        ]
    aux = 1 + n  # resampled S_I and T maps joining each mixing stage
    shapes += [
        ("smm.s4", s4, e5 + e4),
        ("smm.s3", s3, s4 + e3 + aux),
        ("smm.s2", s2, s3 + e2 + aux),
        ("smm.s1", s1, s2 + e1 + aux),
        ("smm.head", 1, s1),
    ]
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Kaiming-uniform conv weights (bound sqrt(6/fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, out_ch, in_ch in _conv_shapes(config):
        bound = np.sqrt(6.0 / (in_ch * 9))
        params[name + ".w"] = rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3))
        params[name + ".b"] = np.zeros(out_ch)
    return params


def infer_config(params: dict[str, np.ndarray]) -> ModelConfig:
    """Recover the architecture from checkpoint tensor shapes."""
    try:
        return ModelConfig(
            in_channels=params["enc.c1.w"].shape[1],
            enc_channels=tuple(params[f"enc.c{i}.w"].shape[0]
                               for i in range(1, 6)),
            dec_channels=tuple(params[f"tdec.d{k}.w"].shape[0]
                               for k in (4, 3, 2, 1)),
            head_hidden=params["tdec.h1.w"].shape[0],
            smm_channels=tuple(params[f"smm.s{k}.w"].shape[0]
                               for k in (4, 3, 2, 1)),
            n_slices=params["tdec.h2.w"].shape[0])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint missing tensor {exc}") from exc


def check_params(params: dict[str, np.ndarray], config: ModelConfig) -> None:
    for name, out_ch, in_ch in _conv_shapes(config):
        w = params.get(name + ".w")
        b = params.get(name + ".b")
        if w is None or b is None:
            raise CheckpointError(f"checkpoint missing {name}")
        if w.shape != (out_ch, in_ch, 3, 3) or b.shape != (out_ch,):
            raise CheckpointError(
                f"{name}: got {w.shape}/{b.shape}, "
                f"expected {(out_ch, in_ch, 3, 3)}/{(out_ch,)}")


# ---------------------------------------------------------------------------
# Forward pieces (all take already-lifted Tensor parameters)
# ---------------------------------------------------------------------------

def _conv(x: ad.Tensor, pt: dict[str, ad.Tensor], name: str,
          stride: int = 1) -> ad.Tensor:
    return ad.conv2d(x, pt[name + ".w"], pt[name + ".b"], stride=stride)


def encode(x: ad.Tensor, pt: dict[str, ad.Tensor]) -> list[ad.Tensor]:
    """Five feature blocks; the first keeps input resolution, each later
    block halves it."""
    if x.data.ndim != 4:
        raise ShapeMismatchError(f"encoder input must be NCHW, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % 16 or w % 16:
        raise ShapeMismatchError(
            f"input spatial dims must be divisible by 16, got {h}x{w}")
    blocks = [ad.relu(_conv(x, pt, "enc.c1", stride=1))]
    for i in range(2, 6):
        blocks.append(ad.relu(_conv(blocks[-1], pt, f"enc.c{i}", stride=2)))
    return blocks


def decode_trunk(blocks: list[ad.Tensor], pt: dict[str, ad.Tensor],
                 prefix: str) -> ad.Tensor:
    """Conv-up-concat ladder from the deepest block to input resolution."""
    x = blocks[4]
    for k in (4, 3, 2, 1):
        x = ad.relu(_conv(x, pt, f"{prefix}.d{k}"))
        x = ad.concat_channels([ad.upsample_bilinear(x, 2), blocks[k - 1]])
    return x


def _decode_head(x: ad.Tensor, pt: dict[str, ad.Tensor],
                 prefix: str) -> ad.Tensor:
    h = ad.relu(_conv(x, pt, f"{prefix}.h1"))
    return ad.sigmoid(_conv(h, pt, f"{prefix}.h2"))


def decode_temporal(blocks: list[ad.Tensor],
                    pt: dict[str, ad.Tensor]) -> ad.Tensor:
    """Per-slice saliency maps, (N, n, H, W) in (0,1)."""
    return _decode_head(decode_trunk(blocks, pt, "tdec"), pt, "tdec")


def decode_image(blocks: list[ad.Tensor],
                 pt: dict[str, ad.Tensor]) -> ad.Tensor:
    """Whole-viewing saliency map, (N, 1, H, W) in (0,1)."""
    return _decode_head(decode_trunk(blocks, pt, "idec"), pt, "idec")


def minmax01(x: ad.Tensor) -> ad.Tensor:
    """Per-sample min-max rescale to [0,1] (then clamped for float safety)."""
    lo = ad.reduce_min(x, axis=(1, 2, 3), keepdims=True)
    hi = ad.reduce_max(x, axis=(1, 2, 3), keepdims=True)
    if np.any(hi.data - lo.data <= 0.0):
        raise DegenerateMapError("cannot min-max normalize a constant map")
    return ad.clamp01(ad.div(ad.sub(x, lo), ad.sub(hi, lo)))


def smm(blocks: list[ad.Tensor], temporal: ad.Tensor, image_map: ad.Tensor,
        pt: dict[str, ad.Tensor]) -> ad.Tensor:
    """Mixing module: fuse the two deepest blocks, then walk back up
    re-injecting each shallower block alongside the predicted maps
    (resampled to each stage's resolution); finally add the predicted
    maps themselves onto the fused logit and rescale."""
    if temporal.shape[0] != blocks[0].shape[0] or \
            image_map.shape[0] != blocks[0].shape[0]:
        raise ShapeMismatchError("batch sizes disagree across mixing inputs")
    x = ad.relu(_conv(ad.concat_channels(
        [ad.upsample_bilinear(blocks[4], 2), blocks[3]]), pt, "smm.s4"))
    for k in (3, 2, 1):
        stage = blocks[k - 1]
        sh, sw = stage.shape[2], stage.shape[3]
        x = ad.relu(_conv(ad.concat_channels([
            ad.upsample_bilinear(x, 2),
            stage,
            ad.resize_bilinear(image_map, sh, sw),
            ad.resize_bilinear(temporal, sh, sw),
        ]), pt, f"smm.s{k}"))
    logit = _conv(x, pt, "smm.head")
    mean_t = ad.reduce_mean(temporal, axis=1, keepdims=True)
    return minmax01(ad.add(ad.add(logit, image_map), mean_t))


def forward(tape: ad.Tape, images: np.ndarray, pt: dict[str, ad.Tensor]
            ) -> tuple[list[ad.Tensor], ad.Tensor, ad.Tensor]:
    """Encoder + both decoders. Returns (blocks, T, S_I)."""
    x = tape.constant(images)
    blocks = encode(x, pt)
    return blocks, decode_temporal(blocks, pt), decode_image(blocks, pt)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _mean_scalars(terms: list[ad.Tensor]) -> ad.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.div(total, total.tape.constant(float(len(terms))))


def _map_term(pred: ad.Tensor, gt: ad.Tensor, lam: float,
              beta: float) -> ad.Tensor:
    tape = pred.tape
    term = tape.constant(0.0)
    if beta > 0.0:
        term = ad.add(term, ad.mul(tape.constant(beta),
                                   kl_loss_node(pred, gt)))
    if lam > 0.0:
        term = ad.sub(term, ad.mul(tape.constant(lam),
                                   cc_loss_node(pred, gt)))
    return term


def stage1_loss(temporal: ad.Tensor, gt_slices: ad.Tensor,
                cfg: LossConfig) -> ad.Tensor:
    """Per-slice beta1*KL - lambda1*CC, averaged over usable channels,
    then over the batch. Constant ground-truth channels carry no signal
    and are skipped with a warning."""
    if temporal.shape != gt_slices.shape:
        raise ShapeMismatchError(
            f"prediction {temporal.shape} vs ground truth {gt_slices.shape}")
    n_batch, n_ch = temporal.shape[0], temporal.shape[1]
    per_image: list[ad.Tensor] = []
    for i in range(n_batch):
        terms: list[ad.Tensor] = []
        for ch in range(n_ch):
            gt_ch = ad.slice_channels(
                ad.slice_batch(gt_slices, i, i + 1), ch, ch + 1)
            if gt_ch.data.max() == gt_ch.data.min():
                warnings.warn(
                    f"image {i} slice {ch}: constant ground truth, skipped")
                continue
            pred_ch = ad.slice_channels(
                ad.slice_batch(temporal, i, i + 1), ch, ch + 1)
            terms.append(_map_term(pred_ch, gt_ch, cfg.lambda1, cfg.beta1))
        if not terms:
            raise DegenerateMapError(
                f"image {i}: every ground-truth slice is constant")
        per_image.append(_mean_scalars(terms))
    return _mean_scalars(per_image)


def stage2_loss(refined: ad.Tensor, gt: ad.Tensor,
                cfg: LossConfig) -> ad.Tensor:
    """beta2*KL - lambda2*CC on the single refined map, batch-averaged."""
    if refined.shape != gt.shape:
        raise ShapeMismatchError(
            f"prediction {refined.shape} vs ground truth {gt.shape}")
    per_image: list[ad.Tensor] = []
    for i in range(refined.shape[0]):
        gt_i = ad.slice_batch(gt, i, i + 1)
        if gt_i.data.max() == gt_i.data.min():
            warnings.warn(f"image {i}: constant ground truth, skipped")
            continue
        per_image.append(_map_term(ad.slice_batch(refined, i, i + 1), gt_i,
                                   cfg.lambda2, cfg.beta2))
    if not per_image:
        raise DegenerateMapError("every ground-truth map is constant")
    return _mean_scalars(per_image)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

SMM_PREFIX = "smm."


def _split_params(params: dict[str, np.ndarray]
                  ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    backbone = {k: v for k, v in params.items()
                if not k.startswith(SMM_PREFIX)}
    mixing = {k: v for k, v in params.items() if k.startswith(SMM_PREFIX)}
    return backbone, mixing


def _check_data(data: TrainData, config: ModelConfig) -> None:
    n = data.images.shape[0]
    if data.images.ndim != 4 or data.images.shape[1] != config.in_channels:
        raise PreconditionError(
            f"images must be (N,{config.in_channels},H,W), "
            f"got {data.images.shape}")
    if data.gt_slices.shape != (n, config.n_slices) + data.images.shape[2:]:
        raise PreconditionError(
            f"gt_slices shape {data.gt_slices.shape} does not match images")
    if data.gt_full.shape != (n, 1) + data.images.shape[2:]:
        raise PreconditionError(
            f"gt_full shape {data.gt_full.shape} does not match images")


def train(data: TrainData, schedule: TrainSchedule, seed: int,
          loss_cfg: LossConfig | None = None,
          config: ModelConfig | None = None,
          base_params: dict[str, np.ndarray] | None = None
          ) -> tuple[dict[str, np.ndarray], list[tuple[int, str, float, float]]]:
    """Run one training stage. Returns (params, loss trace rows).

    Temporal stage: fits encoder and both decoders; the whole-image
    decoder trains jointly on the stage-2 objective applied to its map.
    Mixing stage: requires ``base_params`` (the stage-1 result), re-runs
    the frozen backbone as tape constants with detached outputs, and
    fits only mixing parameters, so frozen gradients are never computed.

    Trace rows are (epoch, stage, mean epoch loss, lr).
    """
    loss_cfg = loss_cfg or LossConfig()
    if schedule.stage == "mixing":
        if base_params is None:
            raise PreconditionError(
                "mixing stage requires the temporal-stage checkpoint")
        config = config or infer_config(base_params)
        check_params(base_params, config)
        params = dict(base_params)
    else:
        if base_params is not None:
            config = config or infer_config(base_params)
            params = dict(base_params)
        else:
            config = config or ModelConfig()
            params = init_params(config, seed)
        check_params(params, config)
    _check_data(data, config)

    if schedule.stage == "temporal":
        trainable, _ = _split_params(params)  # mixing params wait for stage 2
        frozen = None
    else:
        frozen, trainable = _split_params(params)

    rng = np.random.default_rng(seed)
    state = ad.adam_init(trainable)
    n_images = data.images.shape[0]
    trace: list[tuple[int, str, float, float]] = []
    steps_done = 0

    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n_images)
        epoch_losses: list[float] = []
        for start in range(0, n_images, schedule.batch_size):
            if schedule.max_steps is not None and \
                    steps_done >= schedule.max_steps:
                break
            idx = order[start:start + schedule.batch_size]
            loss_value, grads = _train_step(
                data, idx, trainable, frozen, schedule.stage, loss_cfg)
            trainable, state = ad.adam_step(trainable, grads, state, lr=lr)
            epoch_losses.append(loss_value)
            steps_done += 1
        if epoch_losses:
            trace.append((epoch, schedule.stage,
                          float(np.mean(epoch_losses)), lr))
        if schedule.max_steps is not None and steps_done >= schedule.max_steps:
            break

    out = dict(params)
    out.update(trainable)
    return out, trace


def _train_step(data: TrainData, idx: np.ndarray,
                trainable: dict[str, np.ndarray],
                frozen: dict[str, np.ndarray] | None, stage: str,
                loss_cfg: LossConfig) -> tuple[float, dict[str, np.ndarray]]:
    tape = ad.Tape()
    lifted = {k: tape.param(v, k) for k, v in trainable.items()}
    images = data.images[idx]
    gt_slices = tape.constant(data.gt_slices[idx])
    gt_full = tape.constant(data.gt_full[idx])

    if stage == "temporal":
        blocks, temporal, image_map = forward(tape, images, lifted)
        loss = ad.add(stage1_loss(temporal, gt_slices, loss_cfg),
                      stage2_loss(image_map, gt_full, loss_cfg))
    else:
        consts = {k: tape.constant(v) for k, v in frozen.items()}
        blocks, temporal, image_map = forward(tape, images, consts)
        blocks = [b.detach() for b in blocks]
        refined = smm(blocks, temporal.detach(), image_map.detach(), lifted)
        loss = stage2_loss(refined, gt_full, loss_cfg)

    grads = ad.backward(tape, loss)
    named = {name: grads[t.node_id] for name, t in lifted.items()
             if t.node_id in grads}
    return float(loss.data), named


def predict(images: np.ndarray, params: dict[str, np.ndarray],
            config: ModelConfig | None = None) -> dict[str, np.ndarray]:
    """Full forward pass without gradients. Returns arrays
    {"T": (N,n,H,W), "S_I": (N,1,H,W), "S_R": (N,1,H,W)}."""
    config = config or infer_config(params)
    check_params(params, config)
    tape = ad.Tape()
    consts = {k: tape.constant(v) for k, v in params.items()}
    blocks, temporal, image_map = forward(tape, images, consts)
    refined = smm(blocks, temporal, image_map, consts)
    return {"T": temporal.data.copy(), "S_I": image_map.data.copy(),
            "S_R": refined.data.copy()}


def loss_trace_csv(rows: list[tuple[int, str, float, float]]) -> str:
    lines = ["epoch,stage,loss,lr"]
    for epoch, stage, loss, lr in rows:
        lines.append(f"{epoch},{stage},{loss!r},{lr!r}")
    return "\n".join(lines) + "\n"

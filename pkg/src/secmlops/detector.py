"""Center-heatmap pedestrian detector and its training loop.

One 3x3 conv stem, relu, r-strided average pooling, then three 1x1 heads
over the pooled features: a center-presence logit, a log-height, and a
2-channel sub-cell offset per output cell.  A ground-truth center at
pixel (y, x) lands in cell (y // r, x // r) with regression targets
log(height) and the sub-cell remainder (y - r*cell, x - r*cell).

Loss is mean BCE over the center grid (cells inside ignore regions are
masked out; cells holding a GT center are positive) plus lambda_reg times
masked L1 on log-height and offsets at positive cells.

Decoding thresholds sigmoid(center logit), reconstructs boxes with
width = aspect * height, and applies greedy NMS.

Training is plain SGD over seeded mini-batches.  Per-epoch validation
log-average miss rate is recorded; with a patience p the loop stops after
p consecutive epochs without improvement, and in all cases the returned
model carries the parameters of the best (lowest validation laMR,
earliest on ties) epoch.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import diffnet as dn
from . import metrics
from .diffnet import ParamSet, Tape, Tensor
from .errors import (CenterOutsideGrid, Diverged, EmptySplit, InvalidConfig,
                     NonFiniteValues)
from .rng import child_seed
from .synthdata import Dataset, PedestrianGT, Scene


@dataclass(frozen=True)
class DetectorArch:
    stem_channels: int = 8
    downsample: int = 4
    aspect: float = 0.41

    def validate(self) -> None:
        if self.stem_channels < 1:
            raise InvalidConfig("stem_channels must be positive")
        if self.downsample < 1:
            raise InvalidConfig("downsample must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _cosine_basis_3x3() -> np.ndarray:
    """The eight non-constant 3x3 DCT-II basis filters, unit L2 norm each.

    Dropping the constant member leaves exactly eight orthogonal zero-mean
    filters: horizontal and vertical edges at two frequencies and the four
    diagonal checkers.
    """
    i = np.arange(3)
    scale = np.array([np.sqrt(1.0 / 3.0), np.sqrt(2.0 / 3.0), np.sqrt(2.0 / 3.0)])
    rows = scale[:, None] * np.cos(np.pi * (2 * i[None, :] + 1) * i[:, None] / 6.0)
    bank = [np.outer(rows[u], rows[v]) for u in range(3) for v in range(3)
            if (u, v) != (0, 0)]
    return np.stack(bank)


@dataclass
class DetectorOutput:
    """Raw head outputs; tensors during training, arrays from predict()."""

    center: "Tensor | np.ndarray"      # (1, h, w) logits
    log_height: "Tensor | np.ndarray"  # (1, h, w)
    offset: "Tensor | np.ndarray"      # (2, h, w) pixels within the cell


@dataclass
class DetectorModel:
    arch: DetectorArch
    params: ParamSet

    @classmethod
    def init(cls, arch: DetectorArch = DetectorArch(), seed: int = 0) -> "DetectorModel":
        """He-scaled stem, small heads, biases set to sane priors.

        Stem kernels are orthonormalized Gaussian draws (a random rotation
        of the filter space), He-scaled, each sign-aligned so its weight
        sum is non-negative.  An eight-channel stem has no slack: raw
        Gaussian draws routinely hand it near-duplicate filters, and since
        pixels are non-negative brightness, any filter whose weights sum
        negative answers below zero on nearly every patch and its channel
        is dead behind the relu from the first step.  Orthogonal rows rule
        out the redundancy, the sign flips rule out stillbirth, and both
        transformations preserve the draw's scale.  The center bias starts
        at -2 (a low detection prior) and the log-height bias at the log
        of a mid-range pedestrian height, which keeps early training out
        of saturated regimes.
        """
        arch.validate()
        g = np.random.default_rng(child_seed(seed, "detector-init"))
        c = arch.stem_channels
        draw = g.normal(0.0, 1.0, (9, max(c, 1)))
        q = np.linalg.qr(draw, mode="reduced")[0].T[:c]
        stem = (np.sqrt(2.0) * q).reshape(c, 1, 3, 3)
        stem *= np.where(stem.sum(axis=(1, 2, 3)) < 0, -1.0, 1.0)[:, None, None, None]
        tensors = {
            "stem_w": stem,
            "stem_b": np.zeros(c),
            "center_w": g.normal(0.0, 0.05, (1, c)),
            "center_b": np.full(1, -2.0),
            "height_w": g.normal(0.0, 0.05, (1, c)),
            "height_b": np.full(1, np.log(14.0)),
            "offset_w": g.normal(0.0, 0.05, (2, c)),
            "offset_b": np.full(2, arch.downsample / 2.0),
        }
        return cls(arch, ParamSet({k: v.astype(np.float64) for k, v in tensors.items()}))

    def with_params(self, params: ParamSet) -> "DetectorModel":
        return DetectorModel(self.arch, params)

    def grid_shape(self, scene_hw: tuple[int, int]) -> tuple[int, int]:
        h, w = scene_hw
        r = self.arch.downsample
        if h % r or w % r:
            raise InvalidConfig(f"scene {h}x{w} not divisible by downsample {r}")
        return h // r, w // r

    def forward(self, tape: Tape, x: Tensor | np.ndarray,
                param_leaves: dict[str, Tensor] | None = None) -> DetectorOutput:
        """Run the net on a (1, H, W) tensor or array, or a (B, 1, H, W) stack.

        With param_leaves (from `leaves()`), weights are differentiable;
        otherwise they enter as constants, which is what attacks and plain
        prediction want.  A plain-array x is a constant too: training passes
        pixels that way since it never consumes their gradient.
        """
        p = param_leaves if param_leaves is not None else self.params.tensors
        f = dn.relu(dn.conv3x3(x, p["stem_w"], p["stem_b"]))
        pooled = dn.avg_pool2d(f, self.arch.downsample)
        return DetectorOutput(
            center=dn.affine(p["center_w"], pooled, p["center_b"]),
            log_height=dn.affine(p["height_w"], pooled, p["height_b"]),
            offset=dn.affine(p["offset_w"], pooled, p["offset_b"]),
        )

    def leaves(self, tape: Tape) -> dict[str, Tensor]:
        return {k: tape.leaf(v) for k, v in self.params.tensors.items()}

    def predict(self, pixels: np.ndarray) -> DetectorOutput:
        """Plain-array head outputs for one (H, W) scene image."""
        tape = Tape()
        x = tape.leaf(pixels[None, :, :])
        out = self.forward(tape, x)
        return DetectorOutput(out.center.data, out.log_height.data, out.offset.data)

    def predict_batch(self, pixels: np.ndarray) -> DetectorOutput:
        """Head outputs for a (B, H, W) stack, each field (B, ..., h, w)."""
        tape = Tape()
        out = self.forward(tape, tape.leaf(pixels[:, None, :, :]))
        return DetectorOutput(out.center.data, out.log_height.data, out.offset.data)


# ---------------------------------------------------------------------------
# targets and loss


@dataclass
class TargetGrids:
    cls_target: np.ndarray   # (1, h, w) 1 at GT center cells
    cls_mask: np.ndarray     # (1, h, w) 0 inside ignore regions
    height_target: np.ndarray  # (1, h, w) log heights at positive cells
    offset_target: np.ndarray  # (2, h, w) sub-cell remainders
    pos_mask: np.ndarray     # (1, h, w)
    n_pos: int


def build_targets(gts: list[PedestrianGT], grid_hw: tuple[int, int], r: int) -> TargetGrids:
    gh, gw = grid_hw
    cls_t = np.zeros((1, gh, gw))
    cls_m = np.ones((1, gh, gw))
    h_t = np.zeros((1, gh, gw))
    o_t = np.zeros((2, gh, gw))
    pos = np.zeros((1, gh, gw))
    # ignore regions first: mask out cells whose center falls inside the box
    for g in gts:
        if not g.ignore:
            continue
        t, l, b, rr = g.box
        for ci in range(gh):
            cy = (ci + 0.5) * r
            if not (t <= cy < b):
                continue
            for cj in range(gw):
                cx = (cj + 0.5) * r
                if l <= cx < rr:
                    cls_m[0, ci, cj] = 0.0
    n_pos = 0
    for g in gts:
        if g.ignore:
            continue
        ci = int(g.center_row // r)
        cj = int(g.center_col // r)
        if not (0 <= ci < gh and 0 <= cj < gw):
            raise CenterOutsideGrid(
                f"GT center ({g.center_row}, {g.center_col}) outside {gh}x{gw} grid")
        if pos[0, ci, cj]:
            continue  # first GT claims a contested cell
        pos[0, ci, cj] = 1.0
        cls_t[0, ci, cj] = 1.0
        cls_m[0, ci, cj] = 1.0  # a real center overrides ignore masking
        h_t[0, ci, cj] = np.log(float(g.height))
        o_t[0, ci, cj] = g.center_row - ci * r
        o_t[1, ci, cj] = g.center_col - cj * r
        n_pos += 1
    return TargetGrids(cls_t, cls_m, h_t, o_t, pos, n_pos)


def stack_targets(targets: list[TargetGrids]) -> TargetGrids:
    """Stack per-scene target grids along a new leading batch axis.

    loss_on_output on stacked grids normalizes over the whole batch, so
    every scored cell carries the same weight regardless of scene.
    """
    return TargetGrids(
        np.stack([t.cls_target for t in targets]),
        np.stack([t.cls_mask for t in targets]),
        np.stack([t.height_target for t in targets]),
        np.stack([t.offset_target for t in targets]),
        np.stack([t.pos_mask for t in targets]),
        sum(t.n_pos for t in targets),
    )


@dataclass
class LossParts:
    """Total loss with the classification component separately exposed."""

    total: Tensor
    cls: Tensor
    reg: Tensor


def loss_on_output(out: DetectorOutput, targets: TargetGrids,
                   lambda_reg: float = 1.0) -> LossParts:
    # Everything is normalized per scored cell: the classification term is
    # the masked mean BCE, and the L1 terms are sums over positive cells
    # rescaled to the same denominator, so the classification and
    # regression gradients live on one scale and a single learning rate
    # serves both.
    n_valid = float(np.count_nonzero(targets.cls_mask))
    n_pos = float(np.count_nonzero(targets.pos_mask))
    cls = dn.bce_with_logits(out.center, targets.cls_target, targets.cls_mask)
    l1_h = dn.l1_loss(out.log_height, targets.height_target, targets.pos_mask)
    off_mask = np.concatenate([targets.pos_mask, targets.pos_mask], axis=-3)
    l1_o = dn.l1_loss(out.offset, targets.offset_target, off_mask)
    reg = dn.add(dn.mul(n_pos / n_valid, l1_h),
                 dn.mul(2.0 * n_pos / n_valid, l1_o))
    total = dn.add(cls, dn.mul(float(lambda_reg), reg))
    return LossParts(total, cls, reg)


def scene_loss(model: DetectorModel, tape: Tape, x: Tensor,
               gts: list[PedestrianGT],
               param_leaves: dict[str, Tensor] | None = None,
               lambda_reg: float = 1.0) -> LossParts:
    """Forward plus loss for one scene already on the tape as leaf x."""
    out = model.forward(tape, x, param_leaves)
    grid = model.grid_shape((x.data.shape[1], x.data.shape[2]))
    targets = build_targets(gts, grid, model.arch.downsample)
    return loss_on_output(out, targets, lambda_reg)


# ---------------------------------------------------------------------------
# decoding


def decode(model_or_arch, out: DetectorOutput, score_threshold: float = 0.05,
           nms_iou: float = 0.5,
           max_candidates: int | None = None) -> list["metrics.Detection"]:
    """Detections from plain-array head outputs, greedy-NMS deduplicated.

    Boxes with IoU strictly above nms_iou against an already kept,
    higher-scoring box are dropped.  Ties in score break toward the lower
    cell index so decoding is deterministic.  max_candidates caps the
    cells entering NMS to the top-scoring ones, which bounds the cost of
    decoding at a very low (or zero) threshold.
    """
    arch = model_or_arch.arch if isinstance(model_or_arch, DetectorModel) else model_or_arch
    center = np.asarray(out.center)[0]
    logh = np.asarray(out.log_height)[0]
    off = np.asarray(out.offset)
    r = arch.downsample
    probs = 1.0 / (1.0 + np.exp(-np.clip(center, -500, 500)))
    ci, cj = np.nonzero(probs >= score_threshold)
    if ci.size == 0:
        return []
    score = probs[ci, cj]
    h = np.exp(np.clip(logh[ci, cj], -20.0, 20.0))
    w = arch.aspect * h
    row = ci * r + off[0, ci, cj]
    col = cj * r + off[1, ci, cj]
    order = np.lexsort((col, row, -score))
    if max_candidates is not None:
        order = order[:max_candidates]
    score, h, w, row, col = (a[order] for a in (score, h, w, row, col))
    top, bottom = row - h / 2.0, row + h / 2.0
    left, right = col - w / 2.0, col + w / 2.0
    area = h * w
    # each kept box suppresses everything it overlaps in one vector pass
    alive = np.ones(score.size, dtype=bool)
    kept_idx: list[int] = []
    for i in range(score.size):
        if not alive[i]:
            continue
        kept_idx.append(i)
        iw = np.minimum(right[i], right) - np.maximum(left[i], left)
        ih = np.minimum(bottom[i], bottom) - np.maximum(top[i], top)
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        alive &= inter / (area[i] + area - inter) <= nms_iou
    return [metrics.Detection(float(row[i]), float(col[i]), float(h[i]),
                              float(w[i]), float(score[i]))
            for i in kept_idx]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 8
    learning_rate: float = 2e-4
    patience: int | None = None
    seed: int = 0
    lambda_reg: float = 1.0

    def validate(self) -> None:
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise InvalidConfig("learning_rate must be positive and finite")
        if self.patience is not None and self.patience < 1:
            raise InvalidConfig("patience must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_lamr: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return {"epochs": [asdict(e) for e in self.epochs],
                "best_epoch": self.best_epoch, "stop_reason": self.stop_reason}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHistory":
        return cls([EpochRecord(**e) for e in d["epochs"]],
                   d["best_epoch"], d["stop_reason"])


def _batch_loss_and_grads(model: DetectorModel, batch: list[tuple[Scene, list[PedestrianGT]]],
                          lambda_reg: float) -> tuple[float, dict[str, np.ndarray]]:
    """Loss over the batch as one stacked graph; gradients w.r.t. every
    named parameter.  Normalization is batch-level: the masked means run
    over the scored cells of all scenes at once."""
    tape = Tape()
    leaves = model.leaves(tape)
    x = np.stack([scene.pixels[None, :, :] for scene, _ in batch])
    out = model.forward(tape, x, leaves)
    grid = model.grid_shape(batch[0][0].pixels.shape)
    targets = stack_targets([build_targets(gts, grid, model.arch.downsample)
                             for _, gts in batch])
    parts = loss_on_output(out, targets, lambda_reg)
    grads = tape.backward(parts.total)
    named = {name: grads[leaf] for name, leaf in leaves.items()}
    return float(parts.total.data), named


def validation_lamr(model: DetectorModel, dataset: Dataset,
                    scene_ids: tuple[int, ...],
                    subset: "metrics.SubsetFilter | None" = None,
                    score_threshold: float = 0.0, nms_iou: float = 0.25) -> float:
    """laMR of the model on the given scenes for one subset (desk
    Reasonable by default).

    The zero score floor matters: model selection must rank early epochs
    too, and those score every cell far below any deployment-style floor,
    which would round each such epoch up to laMR 1.0 and starve the
    early-stopping policy of signal.  Top-50 capping keeps the floorless
    decode cheap.
    """
    if not scene_ids:
        raise EmptySplit("validation needs at least one scene")
    sub = subset if subset is not None else metrics.DESK_PRESETS["Reasonable"]
    outs = model.predict_batch(np.stack([dataset.scenes[i].pixels
                                         for i in scene_ids]))
    evals = []
    for b, sid in enumerate(scene_ids):
        per = DetectorOutput(outs.center[b], outs.log_height[b], outs.offset[b])
        dets = decode(model, per, score_threshold, nms_iou, max_candidates=50)
        evals.append(metrics.match(dets, dataset.gts[sid], subset=sub))
    return metrics.lamr(metrics.curve(evals))


def train(model: DetectorModel, dataset: Dataset, config: TrainConfig,
          stack=None) -> tuple[DetectorModel, TrainHistory]:
    """SGD over the train split with optional defense hooks.

    `stack` is a defenses.DefenseStack (or None).  CutMix runs at batch
    assembly from its own PRNG stream; adversarial training perturbs each
    batch with PGD at the current weights before the step; early stopping
    patience comes from the stack when present, else from the config.
    """
    config.validate()
    train_ids = list(dataset.split.train)
    val_ids = dataset.split.val
    if not train_ids:
        raise EmptySplit("train split is empty")
    if not val_ids:
        raise EmptySplit("val split is empty")

    cutmix_spec = getattr(stack, "cutmix", None)
    at_spec = getattr(stack, "adversarial_training", None)
    es_spec = getattr(stack, "early_stopping", None)
    patience = es_spec.patience if es_spec is not None else config.patience

    cutmix_rng = None
    if cutmix_spec is not None:
        from .defenses import cutmix as cutmix_fn
        cutmix_rng = np.random.default_rng(child_seed(cutmix_spec.seed, "cutmix"))
    if at_spec is not None:
        from .attacks import pgd_pixels_batch

    params = model.params
    history = TrainHistory()
    best_val = np.inf
    best_params = params.copy()
    best_epoch = 0
    since_best = 0
    stop_reason = "max-epochs"

    for epoch in range(1, config.epochs + 1):
        order = list(train_ids)
        np.random.default_rng(child_seed(config.seed, "shuffle", epoch)).shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            ids = order[start:start + config.batch_size]
            batch = [(dataset.scenes[i], dataset.gts[i]) for i in ids]
            cur = model.with_params(params)
            if cutmix_spec is not None and len(batch) >= 2:
                batch = cutmix_fn(batch, cutmix_spec, cutmix_rng)
            if at_spec is not None:
                adv = pgd_pixels_batch(cur, np.stack([s.pixels for s, _ in batch]),
                                       [gts for _, gts in batch], at_spec)
                batch = [(scene.with_pixels(adv[i]), gts)
                         for i, (scene, gts) in enumerate(batch)]
            try:
                loss, grads = _batch_loss_and_grads(cur, batch, config.lambda_reg)
            except NonFiniteValues as exc:
                raise Diverged(f"non-finite loss at epoch {epoch}") from exc
            params = dn.sgd_step(params, grads, config.learning_rate)
            epoch_losses.append(loss)
        val = validation_lamr(model.with_params(params), dataset, val_ids)
        history.epochs.append(EpochRecord(epoch, float(np.mean(epoch_losses)), val))
        if val < best_val:
            best_val = val
            best_params = params.copy()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if patience is not None and since_best >= patience:
                stop_reason = "patience-exhausted"
                break

    history.best_epoch = best_epoch
    history.stop_reason = stop_reason
    return model.with_params(best_params), history


# ---------------------------------------------------------------------------
# distillation


@dataclass(frozen=True)
class DistillSpec:
    """EMA teacher refinement: after every student step the teacher moves
    to alpha * student + (1 - alpha) * teacher; the student's loss gains
    lambda_d * MSE against the teacher's center logits."""

    alpha: float = 0.5
    lambda_d: float = 0.1
    refine_epochs: int = 2

    def validate(self) -> None:
        if not (0.0 < self.alpha <= 1.0):
            raise InvalidConfig("distillation alpha must be in (0, 1]")
        if self.lambda_d < 0.0:
            raise InvalidConfig("lambda_d must be >= 0")
        if self.refine_epochs < 0:
            raise InvalidConfig("refine_epochs must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> ParamSet:
    new = {k: alpha * student.tensors[k] + (1.0 - alpha) * v
           for k, v in teacher.tensors.items()}
    return ParamSet(new, teacher.step + 1)


# The center-logit MSE has no sigmoid in front of it, so its curvature is
# not capped the way the detection loss's is; refining at the full task rate
# can diverge.  Refinement polishes rather than retrains: a small fraction of
# the task rate lets the EMA average out step noise without walking away from
# the early-stopped optimum.
REFINE_RATE_FACTOR = 0.005


def distill(student: DetectorModel, dataset: Dataset, spec: DistillSpec,
            config: TrainConfig) -> DetectorModel:
    """Refine a trained student against its own EMA teacher; returns the
    teacher."""
    spec.validate()
    config.validate()
    teacher_params = student.params.copy()
    params = student.params
    if spec.lambda_d == 0.0:
        # nothing to pull the student toward the teacher; refining would just
        # be extra plain training, so the pass is an identity
        return student.with_params(teacher_params)
    train_ids = list(dataset.split.train)
    if not train_ids:
        raise EmptySplit("train split is empty")
    rate = config.learning_rate * REFINE_RATE_FACTOR
    for epoch in range(1, spec.refine_epochs + 1):
        order = list(train_ids)
        np.random.default_rng(child_seed(config.seed, "distill", epoch)).shuffle(order)
        for start in range(0, len(order), config.batch_size):
            ids = order[start:start + config.batch_size]
            cur = student.with_params(params)
            teacher = student.with_params(teacher_params)
            xs = np.stack([dataset.scenes[sid].pixels[None, :, :] for sid in ids])
            grid = cur.grid_shape(xs.shape[-2:])
            targets = stack_targets([build_targets(dataset.gts[sid], grid,
                                                   cur.arch.downsample)
                                     for sid in ids])
            tape = Tape()
            leaves = cur.leaves(tape)
            out = cur.forward(tape, xs, leaves)
            parts = loss_on_output(out, targets, config.lambda_reg)
            t_tape = Tape()
            t_center = teacher.forward(t_tape, t_tape.leaf(xs)).center.data
            diff = dn.add(out.center, -t_center)
            mse = dn.mean(dn.mul(diff, diff))
            loss = dn.add(parts.total, dn.mul(float(spec.lambda_d), mse))
            grads = tape.backward(loss)
            params = dn.sgd_step(params, {n: grads[l] for n, l in leaves.items()},
                                 rate)
            teacher_params = ema_update(teacher_params, params, spec.alpha)
    return student.with_params(teacher_params)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: DetectorModel, directory: str | Path) -> None:
    d = Path(directory)
    dn.save_params(model.params, d)
    (d / "arch.json").write_text(json.dumps(model.arch.to_dict(), sort_keys=True))


def load_model(directory: str | Path) -> DetectorModel:
    d = Path(directory)
    arch = DetectorArch(**json.loads((d / "arch.json").read_text()))
    return DetectorModel(arch, dn.load_params(d))

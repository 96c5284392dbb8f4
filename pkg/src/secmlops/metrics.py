"""Miss-rate / false-positives-per-image evaluation.

Detections are matched to ground truth greedily in descending score
order at an IoU threshold.  Ground truth flagged ignore, or falling
outside the active visibility/height subset, forms an ignore pool:
detections whose only overlap is with that pool count neither as true
nor as false positives, and the pool itself is never counted missed.

The detection curve holds one point per distinct score (plus a sentinel
above the maximum, i.e. the empty detection set).  Because greedy
matching of a score-sorted list is prefix-stable, matching once with all
detections and then counting only detections at or above each threshold
is exactly equivalent to re-matching each thresholded subset.

The summary number is the log-average miss rate: the geometric mean of
the miss rate read off at nine FPPI reference points spaced log-evenly
in [1e-2, 1], taking at each reference the best (lowest) miss rate among
curve points with FPPI at or below it, 1.0 when the curve never gets
there, and clamping to [1e-5, 1] so the log is always defined.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import boxes
from .canon import digest_json
from .errors import InvalidConfig, InvalidCurve, NoGroundTruth
from .synthdata import Dataset, PedestrianGT

LAMR_FLOOR = 1e-5
FPPI_REFERENCES = tuple(10.0 ** (-2.0 + k / 4.0) for k in range(9))


@dataclass(frozen=True)
class Detection:
    """One decoded box; score is a calibrated confidence in (0, 1]."""

    center_row: float
    center_col: float
    height: float
    width: float
    score: float

    @property
    def box(self) -> boxes.Box:
        return boxes.box_from_center(self.center_row, self.center_col,
                                     self.height, self.width)


def det_iou(a, b) -> float:
    return boxes.iou(a.box, b.box)


@dataclass(frozen=True)
class SubsetFilter:
    """Visibility/height window selecting which GT is evaluated.

    Visibility bounds: lower inclusive; the upper bound is exclusive when
    `vis_max_exclusive` (the desk-scale Heavy preset) and inclusive
    otherwise.  Height bounds are inclusive on both ends.
    """

    name: str
    vis_min: float = 0.0
    vis_max: float = float("inf")
    height_min: float = 0.0
    height_max: float = float("inf")
    vis_max_exclusive: bool = False

    def admits(self, gt: PedestrianGT) -> bool:
        if gt.visibility < self.vis_min:
            return False
        if self.vis_max_exclusive:
            if gt.visibility >= self.vis_max:
                return False
        elif gt.visibility > self.vis_max:
            return False
        return self.height_min <= gt.height <= self.height_max


CANONICAL_PRESETS: dict[str, SubsetFilter] = {
    "Reasonable": SubsetFilter("Reasonable", vis_min=0.65, height_min=50.0),
    "Small": SubsetFilter("Small", vis_min=0.65, height_min=50.0, height_max=75.0),
    "Heavy": SubsetFilter("Heavy", vis_min=0.25, vis_max=0.65, height_min=50.0),
    "All": SubsetFilter("All", vis_min=0.20, height_min=20.0),
}

DESK_PRESETS: dict[str, SubsetFilter] = {
    "Reasonable": SubsetFilter("Reasonable", vis_min=0.65, height_min=12.0),
    "Small": SubsetFilter("Small", vis_min=0.65, height_min=12.0, height_max=18.0),
    "Heavy": SubsetFilter("Heavy", vis_min=0.25, vis_max=0.65, height_min=12.0,
                          vis_max_exclusive=True),
    "All": SubsetFilter("All", vis_min=0.20, height_min=5.0),
}

PRESETS = {"canonical": CANONICAL_PRESETS, "desk": DESK_PRESETS}


def presets(kind: str) -> dict[str, SubsetFilter]:
    if kind not in PRESETS:
        raise InvalidConfig(f"unknown preset kind {kind!r}")
    return PRESETS[kind]


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    """Per-scene matching outcome.

    det_outcomes[i] is "TP", "FP" or "ignored" for the i-th detection (in
    the order given).  For each active (in-subset, non-ignore) GT,
    match_scores holds the score of its matching detection or None.
    """

    det_outcomes: list[str]
    det_scores: list[float]
    match_scores: list[float | None]

    @property
    def n_gt(self) -> int:
        return len(self.match_scores)

    def tp_scores(self) -> list[float]:
        return [s for s in self.match_scores if s is not None]

    def fp_scores(self) -> list[float]:
        return [s for o, s in zip(self.det_outcomes, self.det_scores) if o == "FP"]


def match(dets: list[Detection], gts: list[PedestrianGT],
          iou_threshold: float = 0.5,
          subset: SubsetFilter | None = None) -> MatchResult:
    """Greedy score-descending matching of one scene.

    Each detection takes the unmatched active GT of highest IoU at or
    above the threshold (ties: lowest GT index).  Failing that, any
    overlap at threshold with the ignore pool marks it "ignored"; else it
    is a false positive.  Ignore-pool boxes may absorb many detections.
    """
    if subset is None:
        active = [g for g in gts if not g.ignore]
        ignore = [g for g in gts if g.ignore]
    else:
        active = [g for g in gts if not g.ignore and subset.admits(g)]
        ignore = [g for g in gts if g.ignore or not subset.admits(g)]
    order = sorted(range(len(dets)),
                   key=lambda i: (-dets[i].score, dets[i].center_row,
                                  dets[i].center_col, i))
    outcomes = [""] * len(dets)
    matched: list[float | None] = [None] * len(active)
    for i in order:
        d = dets[i]
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(active):
            if matched[j] is not None:
                continue
            v = boxes.iou(d.box, g.box)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            outcomes[i] = "TP"
            matched[best_j] = d.score
            continue
        if any(boxes.iou(d.box, g.box) >= iou_threshold for g in ignore):
            outcomes[i] = "ignored"
        else:
            outcomes[i] = "FP"
    return MatchResult(outcomes, [d.score for d in dets], matched)


# ---------------------------------------------------------------------------
# curves


@dataclass
class Curve:
    """MR/FPPI points at descending score thresholds.

    thresholds[0] is a sentinel above every score (the empty detection
    set: MR 1, FPPI 0).  As the threshold drops, FPPI is non-decreasing
    and TP+FN stays equal to the subset GT count.
    """

    thresholds: list[float]
    mr: list[float]
    fppi: list[float]
    tp: list[int]
    fp: list[int]
    fn: list[int]
    n_images: int
    n_gt: int

    def validate(self) -> None:
        for i in range(1, len(self.thresholds)):
            if self.thresholds[i] >= self.thresholds[i - 1]:
                raise InvalidCurve("thresholds must strictly descend")
            if self.fppi[i] < self.fppi[i - 1] - 1e-12:
                raise InvalidCurve("FPPI must be non-decreasing as threshold drops")
            if self.mr[i] > self.mr[i - 1] + 1e-12:
                raise InvalidCurve("MR must be non-increasing as threshold drops")
        for t, f, n in zip(self.tp, self.fn, [self.n_gt] * len(self.tp)):
            if t + f != n:
                raise InvalidCurve("TP+FN must equal the subset GT count")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Curve":
        return cls(**d)


def curve(scene_matches: list[MatchResult]) -> Curve:
    """Aggregate per-scene matches into one MR/FPPI curve.

    Scene count N is len(scene_matches); at least one scene and one
    in-subset GT are required (otherwise MR is undefined).
    """
    if not scene_matches:
        raise NoGroundTruth("curve needs at least one image")
    n_images = len(scene_matches)
    n_gt = sum(m.n_gt for m in scene_matches)
    if n_gt == 0:
        raise NoGroundTruth("curve needs at least one in-subset ground truth")
    tp_scores = np.sort(np.concatenate(
        [np.asarray(m.tp_scores(), dtype=float) for m in scene_matches]
        or [np.empty(0)]))
    fp_scores = np.sort(np.concatenate(
        [np.asarray(m.fp_scores(), dtype=float) for m in scene_matches]
        or [np.empty(0)]))
    all_scores = np.concatenate([tp_scores, fp_scores])
    if all_scores.size:
        distinct = np.unique(all_scores)[::-1]
        sentinel = float(distinct[0]) + 1.0
        thresholds = [sentinel] + [float(c) for c in distinct]
    else:
        thresholds = [1.0]
    tp_list, fp_list, fn_list, mr_list, fppi_list = [], [], [], [], []
    for c in thresholds:
        tp = int(tp_scores.size - np.searchsorted(tp_scores, c, side="left"))
        fp = int(fp_scores.size - np.searchsorted(fp_scores, c, side="left"))
        fn = n_gt - tp
        tp_list.append(tp)
        fp_list.append(fp)
        fn_list.append(fn)
        mr_list.append(fn / n_gt)
        fppi_list.append(fp / n_images)
    out = Curve(thresholds, mr_list, fppi_list, tp_list, fp_list, fn_list,
                n_images, n_gt)
    out.validate()
    return out


def lamr(c: Curve, floor: float = LAMR_FLOOR) -> float:
    """Log-average miss rate over the nine standard FPPI references."""
    c.validate()
    fppi = np.asarray(c.fppi)
    mr = np.asarray(c.mr)
    logs = []
    for f in FPPI_REFERENCES:
        sel = fppi <= f
        v = float(mr[sel].min()) if sel.any() else 1.0
        logs.append(np.log(min(max(v, floor), 1.0)))
    return float(np.exp(np.mean(logs)))


# ---------------------------------------------------------------------------
# model-level evaluation


@dataclass
class MetricReport:
    """Per-subset laMR and curves for one model/dataset/attack combination.

    Subsets with no ground truth in the split are reported absent (None).
    `confidences` collects every decoded detection score, in scene order,
    for drift monitoring.
    """

    preset: str
    lamr: dict[str, float | None]
    curves: dict[str, Curve | None]
    n_images: int
    config_digest: str
    attack: dict | None = None
    confidences: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "lamr": self.lamr,
            "curves": {k: (v.to_dict() if v is not None else None)
                       for k, v in self.curves.items()},
            "n_images": self.n_images,
            "config_digest": self.config_digest,
            "attack": self.attack,
            "confidences": self.confidences,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            preset=d["preset"],
            lamr=d["lamr"],
            curves={k: (Curve.from_dict(v) if v is not None else None)
                    for k, v in d["curves"].items()},
            n_images=d["n_images"],
            config_digest=d["config_digest"],
            attack=d.get("attack"),
            confidences=list(d.get("confidences", [])),
        )

    def digest(self) -> str:
        return digest_json(self.to_dict())


def evaluate(model, dataset: Dataset, split: str = "test",
             preset: str = "desk", attack=None, attack_seed: int = 0,
             score_threshold: float = 0.05, nms_iou: float = 0.25,
             iou_threshold: float = 0.5,
             config_digest: str | None = None) -> MetricReport:
    """Decode (optionally attacked) scenes of a split and score every
    preset subset.

    Scenes are processed in ascending id order; `attack` is an attack
    spec from the attacks module, applied per scene at fixed seed, so
    reports are bit-reproducible.

    The default NMS here is deliberately tighter than decode's: cells
    adjacent to a pedestrian fire with loosely localized boxes, and at 0.5
    those duplicates survive as false positives.  Scene pedestrians are
    sparse enough that 0.25 rarely merges two real ones.
    """
    from . import attacks
    from .detector import DetectorOutput, decode

    ids = sorted(dataset.scene_ids(split))
    if not ids:
        raise NoGroundTruth(f"split {split!r} is empty")
    subs = presets(preset)
    per_scene_dets: list[list[Detection]] = []
    confidences: list[float] = []
    # chunked so the batched graphs stay within memory; chunk grouping does
    # not change signed-gradient attacks (per-scene sign is scale-invariant)
    for lo in range(0, len(ids), 25):
        chunk = ids[lo:lo + 25]
        pixels = np.stack([dataset.scenes[sid].pixels for sid in chunk])
        if isinstance(attack, (attacks.FgsmSpec, attacks.PgdSpec)):
            gts_list = [dataset.gts[sid] for sid in chunk]
            if isinstance(attack, attacks.FgsmSpec):
                g = attacks.cls_grad_batch(model, pixels, gts_list)
                pixels = attacks.fgsm_pixels(g, pixels, attack.epsilon)
            else:
                pixels = attacks.pgd_pixels_batch(model, pixels, gts_list, attack)
        elif attack is not None:
            pixels = np.stack([
                attacks.attack_scene(model, dataset.scenes[sid], dataset.gts[sid],
                                     attack, seed=attack_seed).pixels
                for sid in chunk])
        outs = model.predict_batch(pixels)
        for b in range(len(chunk)):
            per = DetectorOutput(outs.center[b], outs.log_height[b], outs.offset[b])
            dets = decode(model, per, score_threshold, nms_iou)
            per_scene_dets.append(dets)
            confidences.extend(d.score for d in dets)
    lamr_by: dict[str, float | None] = {}
    curves_by: dict[str, Curve | None] = {}
    for name, sub in subs.items():
        matches = [match(dets, dataset.gts[sid], iou_threshold, sub)
                   for dets, sid in zip(per_scene_dets, ids)]
        if sum(m.n_gt for m in matches) == 0:
            lamr_by[name] = None
            curves_by[name] = None
            continue
        cv = curve(matches)
        curves_by[name] = cv
        lamr_by[name] = lamr(cv)
    if config_digest is None:
        config_digest = digest_json({
            "dataset": dataset.digest(), "split": split, "preset": preset,
            "attack": attacks.spec_dict(attack) if attack is not None else None,
            "attack_seed": attack_seed, "score_threshold": score_threshold,
            "nms_iou": nms_iou, "iou_threshold": iou_threshold,
        })
    return MetricReport(
        preset=preset, lamr=lamr_by, curves=curves_by, n_images=len(ids),
        config_digest=config_digest,
        attack=attacks.spec_dict(attack) if attack is not None else None,
        confidences=confidences)

"""Training-time and inference-time attacks on the detector.

Label poisoning flips a Bernoulli(gamma)-selected fraction of training
labels onto edge-feature cluster centroids away from true pedestrians,
leaving pixels untouched.  FGSM and PGD perturb pixels along the sign of
the classification-loss gradient under an L-infinity budget; DeepFool
walks the top positive center cell's logit to its decision boundary with
minimal L2 steps and overshoots by a factor (1 + xi).

All pixel attacks clip into the valid range [0, 1] and are deterministic
given (model, scene, spec): PGD with one step of size epsilon is
bit-identical to FGSM.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, replace
from typing import Callable

import numpy as np

from . import diffnet as dn
from .detector import (DetectorModel, build_targets, loss_on_output,
                       scene_loss, stack_targets)
from .errors import InvalidConfig, NoPositiveCell, ZeroGradient
from .rng import Stream, child_seed
from .synthdata import (AdvCandidateSet, Dataset, EdgeParams, PedestrianGT,
                        Scene, candidate_sets)


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class PoisonSpec:
    kind: str = "poison"
    gamma: float = 0.1
    seed: int = 0
    edge_params: EdgeParams = EdgeParams()

    def validate(self) -> None:
        if not (0.0 <= self.gamma <= 1.0):
            raise InvalidConfig("poison gamma must be within [0, 1]")


@dataclass(frozen=True)
class FgsmSpec:
    kind: str = "fgsm"
    epsilon: float = 0.03

    def validate(self) -> None:
        if self.epsilon < 0.0:
            raise InvalidConfig("fgsm epsilon must be >= 0")


@dataclass(frozen=True)
class DeepFoolSpec:
    kind: str = "deepfool"
    overshoot: float = 0.03
    max_iterations: int = 50
    target_rule: str = "highest_logit"

    def validate(self) -> None:
        if self.overshoot < 0.0:
            raise InvalidConfig("deepfool overshoot must be >= 0")
        if self.max_iterations < 1:
            raise InvalidConfig("deepfool max_iterations must be >= 1")
        if self.target_rule != "highest_logit":
            raise InvalidConfig(f"unknown target rule {self.target_rule!r}")


@dataclass(frozen=True)
class PgdSpec:
    kind: str = "pgd"
    epsilon: float = 0.02
    alpha_step: float = 0.01
    iterations: int = 3

    def validate(self) -> None:
        if self.epsilon < 0.0:
            raise InvalidConfig("pgd epsilon must be >= 0")
        if self.alpha_step <= 0.0:
            raise InvalidConfig("pgd alpha_step must be > 0")
        if self.iterations < 1:
            raise InvalidConfig("pgd iterations must be >= 1")


AttackSpec = PoisonSpec | FgsmSpec | DeepFoolSpec | PgdSpec


def spec_dict(spec: AttackSpec) -> dict:
    d = asdict(spec)
    return d


def spec_from_dict(d: dict) -> AttackSpec:
    kinds = {"poison": PoisonSpec, "fgsm": FgsmSpec, "deepfool": DeepFoolSpec,
             "pgd": PgdSpec}
    d = dict(d)
    kind = d.get("kind")
    if kind not in kinds:
        raise InvalidConfig(f"unknown attack kind {kind!r}")
    if kind == "poison" and isinstance(d.get("edge_params"), dict):
        d["edge_params"] = EdgeParams(**d["edge_params"])
    spec = kinds[kind](**d)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# label poisoning


@dataclass(frozen=True)
class FlipRecord:
    scene_id: int
    label_index: int
    old_center: tuple[float, float]
    new_center: tuple[float, float]

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "label_index": self.label_index,
                "old_center": list(self.old_center),
                "new_center": list(self.new_center)}


def poison_labels(dataset: Dataset, spec: PoisonSpec,
                  candidates: dict[int, AdvCandidateSet] | None = None
                  ) -> tuple[Dataset, list[FlipRecord]]:
    """Flip training labels onto adversarial centers; returns (poisoned
    dataset, flip manifest).

    Only train-split scenes are touched (poisoning is a training-time
    attack; evaluation labels must stay truthful) and golden scenes are
    excluded by construction.  Scenes are visited in ascending id order,
    labels in index order; each label consumes one Bernoulli(gamma) draw
    whether or not its scene has candidates, so the draw sequence is
    independent of extraction parameters.  A flipped label keeps its box
    size and moves its center to a uniformly chosen candidate centroid.
    """
    spec.validate()
    target_ids = sorted(set(dataset.split.train) - set(dataset.split.golden))
    if candidates is None:
        candidates = candidate_sets(dataset, spec.edge_params, tuple(target_ids))
    stream = Stream(child_seed(spec.seed, "poison"))
    new_gts = [list(gts) for gts in dataset.gts]
    manifest: list[FlipRecord] = []
    for sid in target_ids:
        cands = candidates[sid].centers if sid in candidates else ()
        for li, gt in enumerate(dataset.gts[sid]):
            if not stream.chance(spec.gamma):
                continue
            if not cands:
                continue
            pick = cands[stream.randint(0, len(cands) - 1)]
            new_gts[sid][li] = replace(gt, center_row=pick[0], center_col=pick[1])
            manifest.append(FlipRecord(sid, li, (gt.center_row, gt.center_col),
                                       (pick[0], pick[1])))
    return dataset.clone_with_gts(new_gts), manifest


# ---------------------------------------------------------------------------
# gradient helpers


def cls_loss_and_grad(model: DetectorModel, pixels: np.ndarray,
                      gts: list[PedestrianGT]) -> tuple[float, np.ndarray]:
    """Classification loss and its gradient w.r.t. the input pixels.

    Parameters enter the tape as constants, so backward touches only the
    pixel leaf.
    """
    tape = dn.Tape()
    x = tape.leaf(pixels[None, :, :])
    parts = scene_loss(model, tape, x, gts)
    grads = tape.backward(parts.cls)
    return float(parts.cls.data), grads[x][0]


def cls_grad_batch(model: DetectorModel, pixels: np.ndarray,
                   gts_list: list[list[PedestrianGT]]) -> np.ndarray:
    """Classification-loss gradient w.r.t. a (B, H, W) pixel stack.

    One graph serves the whole batch.  Each scene's slice differs from
    its per-scene gradient only by a positive factor (the scene's share
    of the batch-wide mask denominator), so signed-step attacks produce
    the same perturbations either way.
    """
    tape = dn.Tape()
    x = tape.leaf(pixels[:, None, :, :])
    out = model.forward(tape, x)
    grid = model.grid_shape(pixels.shape[-2:])
    targets = stack_targets([build_targets(gts, grid, model.arch.downsample)
                             for gts in gts_list])
    parts = loss_on_output(out, targets)
    grads = tape.backward(parts.cls)
    return grads[x][:, 0]


# ---------------------------------------------------------------------------
# FGSM / PGD


def fgsm_pixels(loss_grad: np.ndarray, pixels: np.ndarray, epsilon: float,
                clip: tuple[float, float] | None = (0.0, 1.0)) -> np.ndarray:
    adv = pixels + epsilon * np.sign(loss_grad)
    if clip is not None:
        adv = np.clip(adv, clip[0], clip[1])
    return adv


def fgsm(model: DetectorModel, scene: Scene, gts: list[PedestrianGT],
         spec: FgsmSpec) -> Scene:
    """One signed gradient step on the classification loss."""
    spec.validate()
    _, g = cls_loss_and_grad(model, scene.pixels, gts)
    return scene.with_pixels(fgsm_pixels(g, scene.pixels, spec.epsilon))


def pgd_pixels(model: DetectorModel, pixels: np.ndarray,
               gts: list[PedestrianGT], spec: PgdSpec) -> np.ndarray:
    """Iterated signed steps, re-projected into the epsilon ball and the
    valid pixel range after every step."""
    spec.validate()
    lo = pixels - spec.epsilon
    hi = pixels + spec.epsilon
    adv = pixels.copy()
    for _ in range(spec.iterations):
        _, g = cls_loss_and_grad(model, adv, gts)
        adv = adv + spec.alpha_step * np.sign(g)
        adv = np.minimum(np.maximum(adv, lo), hi)
        adv = np.clip(adv, 0.0, 1.0)
    return adv


def pgd(model: DetectorModel, scene: Scene, gts: list[PedestrianGT],
        spec: PgdSpec) -> Scene:
    return scene.with_pixels(pgd_pixels(model, scene.pixels, gts, spec))


def pgd_pixels_batch(model: DetectorModel, pixels: np.ndarray,
                     gts_list: list[list[PedestrianGT]],
                     spec: PgdSpec) -> np.ndarray:
    """pgd_pixels over a (B, H, W) stack, one graph per iteration.

    Matches the per-scene attack output (see cls_grad_batch); this is the
    fast path adversarial training uses.
    """
    spec.validate()
    lo = pixels - spec.epsilon
    hi = pixels + spec.epsilon
    adv = pixels.copy()
    for _ in range(spec.iterations):
        g = cls_grad_batch(model, adv, gts_list)
        adv = adv + spec.alpha_step * np.sign(g)
        adv = np.minimum(np.maximum(adv, lo), hi)
        adv = np.clip(adv, 0.0, 1.0)
    return adv


# ---------------------------------------------------------------------------
# DeepFool


def deepfool_binary(fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                    x0: np.ndarray, overshoot: float, max_iterations: int = 50,
                    clip: tuple[float, float] | None = None
                    ) -> tuple[np.ndarray, int]:
    """DeepFool against a binary decision function f (positive side in).

    Iterates x += -f(x) * grad / ||grad||^2 until f is no longer strictly
    positive (an input already at or below the boundary takes zero
    iterations and comes back unchanged), then overshoots the accumulated
    perturbation by (1 + overshoot).  Returns (x_adv, iterations used).
    """
    x = x0.astype(np.float64).copy()
    iterations = 0
    for _ in range(max_iterations):
        f, g = fn(x)
        if f <= 0.0:
            break
        gnorm2 = float(np.dot(g.ravel(), g.ravel()))
        if gnorm2 == 0.0:
            raise ZeroGradient("deepfool hit a zero-gradient plateau")
        x = x + (-f / gnorm2) * g
        iterations += 1
    adv = x0 + (1.0 + overshoot) * (x - x0)
    if clip is not None:
        adv = np.clip(adv, clip[0], clip[1])
    return adv, iterations


def deepfool(model: DetectorModel, scene: Scene,
             spec: DeepFoolSpec) -> tuple[Scene, int]:
    """Attack the highest-confidence positive center cell of a scene.

    The target cell is fixed up front; if no cell has a positive center
    logit the model detects nothing and there is no decision to flip.
    """
    spec.validate()
    out = model.predict(scene.pixels)
    center = np.asarray(out.center)[0]
    ci, cj = np.unravel_index(int(np.argmax(center)), center.shape)
    if center[ci, cj] <= 0.0:
        raise NoPositiveCell("no positively classified center cell to attack")

    def fn(pixels: np.ndarray) -> tuple[float, np.ndarray]:
        tape = dn.Tape()
        x = tape.leaf(pixels[None, :, :])
        o = model.forward(tape, x)
        # project out the target cell's logit as a scalar
        sel = np.zeros(o.center.data.shape)
        sel[0, ci, cj] = 1.0
        n = o.center.data.size
        f = dn.mul(float(n), dn.mean(dn.mul(o.center, sel)))
        grads = tape.backward(f)
        return float(f.data), grads[x][0]

    adv, iters = deepfool_binary(fn, scene.pixels, spec.overshoot,
                                 spec.max_iterations, clip=(0.0, 1.0))
    return scene.with_pixels(adv), iters


# ---------------------------------------------------------------------------
# evaluation dispatch


def attack_scene(model: DetectorModel, scene: Scene, gts: list[PedestrianGT],
                 spec: AttackSpec, seed: int = 0) -> Scene:
    """Apply an inference-time attack to one scene for evaluation.

    DeepFool falls back to the clean scene when the model sees nothing to
    attack (no positive cell).  Poisoning is a training-time attack and is
    rejected here.
    """
    if isinstance(spec, FgsmSpec):
        return fgsm(model, scene, gts, spec)
    if isinstance(spec, PgdSpec):
        return pgd(model, scene, gts, spec)
    if isinstance(spec, DeepFoolSpec):
        try:
            adv, _ = deepfool(model, scene, spec)
        except NoPositiveCell:
            return scene
        return adv
    if isinstance(spec, PoisonSpec):
        raise InvalidConfig("label poisoning applies at training time, "
                            "not per evaluation scene")
    raise InvalidConfig(f"unknown attack spec {spec!r}")

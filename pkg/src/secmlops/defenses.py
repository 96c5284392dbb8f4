"""Defense stack: CutMix, adversarial training, early stopping, EMA
distillation.

The composition order is fixed: CutMix operates at batch assembly,
adversarial training (or plain SGD) consumes the batches, early stopping
bounds the epoch loop, and distillation refines the trained model
afterwards.  An empty stack reproduces plain training exactly, and
adversarial training at epsilon 0 is bit-identical to no adversarial
training at all.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .attacks import PgdSpec
from .detector import (DetectorArch, DetectorModel, DistillSpec, TrainConfig,
                       TrainHistory, distill, train)
from .errors import BatchTooSmall, InvalidConfig
from .synthdata import Dataset, PedestrianGT, Scene


@dataclass(frozen=True)
class CutMixSpec:
    """Batchwise CutMix: with probability `probability` per batch, draw
    lambda ~ Beta(beta_a, beta_b), cut a rectangle of area fraction
    (1 - lambda), and paste it from a shuffled partner scene, transplanting
    the ground truth whose centers ride along.

    Draws come from a dedicated PRNG stream seeded by `seed`, so enabling
    CutMix never perturbs any other random sequence.
    """

    probability: float = 0.5
    beta_a: float = 1.0
    beta_b: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.probability <= 1.0):
            raise InvalidConfig("cutmix probability must be within [0, 1]")
        if self.beta_a <= 0.0 or self.beta_b <= 0.0:
            raise InvalidConfig("cutmix beta parameters must be > 0")


@dataclass(frozen=True)
class EarlyStopSpec:
    patience: int = 15

    def validate(self) -> None:
        if self.patience < 1:
            raise InvalidConfig("early stopping patience must be >= 1")


Batch = list[tuple[Scene, list[PedestrianGT]]]


def cutmix_rect(lam: float, height: int, width: int,
                rng: np.random.Generator) -> tuple[int, int, int, int]:
    """(top, left, rect_h, rect_w) with area fraction (1 - lambda).

    The rectangle always lies fully inside the image: side lengths are
    round(sqrt(1 - lambda) * dim) and the corner is uniform over valid
    positions, so lambda = 0 degenerates to the full image and the swap
    becomes a pure scene permutation.
    """
    frac = float(np.sqrt(max(0.0, 1.0 - lam)))
    rect_h = int(round(frac * height))
    rect_w = int(round(frac * width))
    top = int(rng.integers(0, height - rect_h + 1))
    left = int(rng.integers(0, width - rect_w + 1))
    return top, left, rect_h, rect_w


def apply_cutmix_rect(batch: Batch, perm: list[int], top: int, left: int,
                      rect_h: int, rect_w: int) -> Batch:
    """Deterministic kernel: paste the rect from each partner and move GT
    by center membership."""
    if rect_h == 0 or rect_w == 0:
        return batch
    out: Batch = []
    bottom, right = top + rect_h, left + rect_w

    def inside(g: PedestrianGT) -> bool:
        return (top <= g.center_row < bottom) and (left <= g.center_col < right)

    for i, (scene, gts) in enumerate(batch):
        partner_scene, partner_gts = batch[perm[i]]
        pixels = scene.pixels.copy()
        pixels[top:bottom, left:right] = partner_scene.pixels[top:bottom, left:right]
        new_gts = [g for g in gts if not inside(g)] + \
                  [g for g in partner_gts if inside(g)]
        out.append((scene.with_pixels(pixels), new_gts))
    return out


def cutmix(batch: Batch, spec: CutMixSpec, rng: np.random.Generator) -> Batch:
    """Apply CutMix to one batch (or return it untouched, per the batch
    coin flip).  Needs at least two scenes to pair up."""
    spec.validate()
    if len(batch) < 2:
        raise BatchTooSmall("cutmix needs a batch of at least two scenes")
    if rng.uniform() >= spec.probability:
        return batch
    lam = float(rng.beta(spec.beta_a, spec.beta_b))
    h, w = batch[0][0].pixels.shape
    top, left, rect_h, rect_w = cutmix_rect(lam, h, w, rng)
    perm = list(rng.permutation(len(batch)))
    return apply_cutmix_rect(batch, perm, top, left, rect_h, rect_w)


# ---------------------------------------------------------------------------
# stack


@dataclass(frozen=True)
class DefenseStack:
    """Which defenses run, with their specs.  All fields optional."""

    cutmix: CutMixSpec | None = None
    adversarial_training: PgdSpec | None = None
    early_stopping: EarlyStopSpec | None = None
    distillation: DistillSpec | None = None
    distill_stage: str = "post"  # "post": distill after (adversarial) training;
    #                              "pre": plain-train, distill, then AT-refine

    def validate(self) -> None:
        for spec in (self.cutmix, self.adversarial_training,
                     self.early_stopping, self.distillation):
            if spec is not None:
                spec.validate()
        if self.distill_stage not in ("post", "pre"):
            raise InvalidConfig(f"unknown distill_stage {self.distill_stage!r}")

    def to_dict(self) -> dict:
        return {
            "cutmix": asdict(self.cutmix) if self.cutmix else None,
            "adversarial_training": (asdict(self.adversarial_training)
                                     if self.adversarial_training else None),
            "early_stopping": asdict(self.early_stopping) if self.early_stopping else None,
            "distillation": asdict(self.distillation) if self.distillation else None,
            "distill_stage": self.distill_stage,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DefenseStack":
        def sub(key, typ):
            v = d.get(key)
            return typ(**v) if isinstance(v, dict) else None
        return cls(
            cutmix=sub("cutmix", CutMixSpec),
            adversarial_training=sub("adversarial_training", PgdSpec),
            early_stopping=sub("early_stopping", EarlyStopSpec),
            distillation=sub("distillation", DistillSpec),
            distill_stage=d.get("distill_stage", "post"),
        )


def named_stack(name: str) -> DefenseStack:
    """Registry of preset stacks selectable from configs by name."""
    stacks = {
        "none": DefenseStack(),
        "cutmix": DefenseStack(cutmix=CutMixSpec()),
        "es_at": DefenseStack(adversarial_training=PgdSpec(epsilon=0.02),
                              early_stopping=EarlyStopSpec(patience=15)),
        "md": DefenseStack(distillation=DistillSpec(alpha=0.5)),
        "secmlops": DefenseStack(
            # Beta(8, 2) keeps the pasted patches small (mean 20% of the
            # image).  Symmetric Beta(1, 1) swaps half the scene on average,
            # which churns so many labels that adversarial training loses
            # its robustness gain and validation stalls long enough to trip
            # the patience rule.
            cutmix=CutMixSpec(probability=0.5, beta_a=8.0, beta_b=2.0),
            adversarial_training=PgdSpec(epsilon=0.02),
            early_stopping=EarlyStopSpec(patience=15),
            distillation=DistillSpec(alpha=0.5, refine_epochs=1),
        ),
    }
    if name not in stacks:
        raise InvalidConfig(f"unknown defense stack {name!r}; "
                            f"known: {sorted(stacks)}")
    return stacks[name]


def adversarial_train(model: DetectorModel, dataset: Dataset,
                      config: TrainConfig, pgd_spec: PgdSpec
                      ) -> tuple[DetectorModel, TrainHistory]:
    """Training where every mini-batch is PGD-perturbed at the current
    weights before the SGD step."""
    return train(model, dataset, config,
                 DefenseStack(adversarial_training=pgd_spec))


def apply_stack(dataset: Dataset, stack: DefenseStack, config: TrainConfig,
                arch: DetectorArch = DetectorArch()
                ) -> tuple[DetectorModel, TrainHistory, dict]:
    """Train a fresh model under the given defense stack.

    Returns (model, history, provenance); the provenance dict records
    every spec and seed and reconstructs the run via from_provenance data.
    """
    stack.validate()
    config.validate()
    model = DetectorModel.init(arch, seed=config.seed)
    if stack.distill_stage == "pre" and stack.distillation is not None:
        pre_stack = DefenseStack(cutmix=stack.cutmix,
                                 early_stopping=stack.early_stopping)
        model, history = train(model, dataset, config, pre_stack)
        model = distill(model, dataset, stack.distillation, config)
        if stack.adversarial_training is not None:
            at_stack = DefenseStack(adversarial_training=stack.adversarial_training,
                                    early_stopping=stack.early_stopping)
            model, history = train(model, dataset, config, at_stack)
    else:
        model, history = train(model, dataset, config, stack)
        if stack.distillation is not None:
            model = distill(model, dataset, stack.distillation, config)
    provenance = {
        "stack": stack.to_dict(),
        "train": config.to_dict(),
        "arch": arch.to_dict(),
        "dataset_digest": dataset.digest(),
        "dataset_seed": dataset.seed,
    }
    return model, history, provenance

"""Synthetic street-scene generator with pixel-accurate ground truth.

Scenes are small float64 grayscale images in [0, 1]: a noisy dark
background, pedestrians as bright textured vertical rectangles, thin
poles and small blobs as distractors, and occasional occluder blocks
drawn over pedestrians.  Visibility is the exact fraction of a
pedestrian's box area left uncovered by occluder boxes.  Faint
pedestrian-shaped "reflections" are emitted as ignore regions in scenes
that contain at least one real pedestrian.

Determinism: every scene draws from its own splitmix64 stream seeded by
child_seed(dataset_seed, "scene", scene_id); the draw order is fixed by
the body of `_generate_scene`, so a dataset is fully determined by
(config, seed).  The split shuffle uses child_seed(seed, "split").

On disk a dataset is a directory of per-scene binaries plus an
`index.json` carrying config, ground truth and splits.  Scene files have
a 16-byte header (4-byte magic, u32 height, u32 width, u32 reserved,
little-endian) followed by row-major little-endian float64 pixels.
Clean scenes use magic "SMLB"; adversarially perturbed ones "SMLA".
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import boxes
from .canon import canonical_json_bytes, digest_json, sha256_hex
from .errors import InvalidConfig
from .rng import Stream, child_seed

MAGIC_CLEAN = b"SMLB"
MAGIC_ADV = b"SMLA"
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class DatasetConfig:
    """Knobs of the scene generator; defaults give the desk-scale corpus."""

    height: int = 64
    width: int = 128
    n_scenes: int = 200
    ped_count_min: int = 0
    ped_count_max: int = 4
    ped_height_min: int = 10
    ped_height_max: int = 16
    aspect: float = 0.41
    occlusion_prob: float = 0.35
    distractor_count_min: int = 1
    distractor_count_max: int = 4
    ignore_region_prob: float = 0.10
    train_frac: float = 0.60
    val_frac: float = 0.15
    test_frac: float = 0.15
    golden_fraction: float = 0.10

    def validate(self) -> None:
        if self.height < 16 or self.width < 16:
            raise InvalidConfig("scene dimensions must be at least 16x16")
        if self.n_scenes < 1:
            raise InvalidConfig("n_scenes must be positive")
        if not (0 <= self.ped_count_min <= self.ped_count_max):
            raise InvalidConfig("bad pedestrian count range")
        if not (1 <= self.ped_height_min <= self.ped_height_max <= self.height):
            raise InvalidConfig("pedestrian heights must fit the scene")
        if not (0.0 < self.aspect < 1.0):
            raise InvalidConfig("aspect must be in (0, 1)")
        if not (0 <= self.distractor_count_min <= self.distractor_count_max):
            raise InvalidConfig("bad distractor count range")
        for name in ("occlusion_prob", "ignore_region_prob", "golden_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidConfig(f"{name} must be within [0, 1]")
        fr = self.train_frac + self.val_frac + self.test_frac
        if min(self.train_frac, self.val_frac, self.test_frac) < 0 or fr > 1.0 + 1e-9:
            raise InvalidConfig("split fractions must be non-negative and sum to <= 1")

    @property
    def mean_ped_count(self) -> float:
        return (self.ped_count_min + self.ped_count_max) / 2.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PedestrianGT:
    """One labelled box: center in pixels, integer box size, visibility.

    Width is always round(aspect * height).  `ignore` marks regions
    (reflections, dense groups) excluded from the loss and from false
    positive counting.
    """

    center_row: float
    center_col: float
    height: int
    width: int
    visibility: float
    ignore: bool = False

    @property
    def box(self) -> boxes.Box:
        return boxes.box_from_center(self.center_row, self.center_col,
                                     float(self.height), float(self.width))

    def to_dict(self) -> dict:
        return {"center_row": self.center_row, "center_col": self.center_col,
                "height": self.height, "width": self.width,
                "visibility": self.visibility, "ignore": self.ignore}

    @classmethod
    def from_dict(cls, d: dict) -> "PedestrianGT":
        return cls(d["center_row"], d["center_col"], d["height"], d["width"],
                   d["visibility"], d["ignore"])


@dataclass(frozen=True)
class Scene:
    """One image: id, float64 pixels in [0, 1], and its stream seed."""

    scene_id: int
    pixels: np.ndarray
    rng_seed: int

    def with_pixels(self, pixels: np.ndarray) -> "Scene":
        return Scene(self.scene_id, np.asarray(pixels, dtype=np.float64),
                     self.rng_seed)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint scene-id lists.  Golden scenes are verified clean and are
    never poisoned; there are at least golden_fraction * |train| of them."""

    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]
    golden: tuple[int, ...]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val),
                "test": list(self.test), "golden": list(self.golden)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(tuple(d["train"]), tuple(d["val"]),
                   tuple(d["test"]), tuple(d["golden"]))


@dataclass
class Dataset:
    config: DatasetConfig
    seed: int
    scenes: list[Scene]
    gts: list[list[PedestrianGT]]
    split: DatasetSplit

    def scene_ids(self, split_name: str) -> tuple[int, ...]:
        return getattr(self.split, split_name)

    def clone_with_gts(self, gts: list[list[PedestrianGT]]) -> "Dataset":
        return Dataset(self.config, self.seed, self.scenes, gts, self.split)

    def index_dict(self) -> dict:
        return {
            "format": 1,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "split": self.split.to_dict(),
            "scenes": [
                {"id": s.scene_id, "rng_seed": s.rng_seed,
                 "gts": [g.to_dict() for g in self.gts[s.scene_id]]}
                for s in self.scenes
            ],
        }

    def digest(self) -> str:
        """Content digest covering labels, splits, config and pixels."""
        idx = self.index_dict()
        idx["pixel_sha256"] = [sha256_hex(_pixel_bytes(s.pixels)) for s in self.scenes]
        return digest_json(idx)


def compute_visibility(gt_box: boxes.Box, occluders: list[boxes.Box]) -> float:
    """Fraction of gt_box area not covered by the union of occluder boxes."""
    total = boxes.area(gt_box)
    covered = boxes.union_area_within(gt_box, occluders)
    return (total - covered) / total


def generate(config: DatasetConfig, seed: int) -> Dataset:
    """Deterministically generate a dataset from (config, seed)."""
    config.validate()
    scenes: list[Scene] = []
    gts: list[list[PedestrianGT]] = []
    for sid in range(config.n_scenes):
        sseed = child_seed(seed, "scene", sid)
        pixels, scene_gts = _generate_scene(config, Stream(sseed))
        scenes.append(Scene(sid, pixels, sseed))
        gts.append(scene_gts)
    split = _make_split(config, seed)
    return Dataset(config, seed, scenes, gts, split)


def _make_split(config: DatasetConfig, seed: int) -> DatasetSplit:
    ids = list(range(config.n_scenes))
    Stream(child_seed(seed, "split")).shuffle(ids)
    n = config.n_scenes
    n_train = round(config.train_frac * n)
    n_val = round(config.val_frac * n)
    n_test = round(config.test_frac * n)
    train = tuple(ids[:n_train])
    val = tuple(ids[n_train:n_train + n_val])
    test = tuple(ids[n_train + n_val:n_train + n_val + n_test])
    golden = tuple(ids[n_train + n_val + n_test:])
    if len(golden) < config.golden_fraction * len(train):
        raise InvalidConfig(
            f"golden split ({len(golden)} scenes) is below "
            f"golden_fraction * |train| = {config.golden_fraction * len(train):.1f}")
    return DatasetSplit(train, val, test, golden)


def _generate_scene(cfg: DatasetConfig, s: Stream) -> tuple[np.ndarray, list[PedestrianGT]]:
    h, w = cfg.height, cfg.width
    base = s.uniform(0.08, 0.18)
    img = base + s.fill_uniform((h, w), 0.0, 0.08)

    # pedestrians
    n_ped = s.randint(cfg.ped_count_min, cfg.ped_count_max)
    ped_boxes: list[tuple[int, int, int, int]] = []  # (top, left, ph, pw) ints
    gts: list[PedestrianGT] = []
    for _ in range(n_ped):
        ph = s.randint(cfg.ped_height_min, cfg.ped_height_max)
        pw = max(1, round(cfg.aspect * ph))
        top = left = 0
        for _try in range(20):
            top = s.randint(0, h - ph)
            left = s.randint(0, w - pw)
            if not any(top < t2 + h2 + 1 and t2 < top + ph + 1
                       and left < l2 + w2 + 1 and l2 < left + pw + 1
                       for t2, l2, h2, w2 in ped_boxes):
                break
        ped_boxes.append((top, left, ph, pw))
        # shaded body: bright head fading toward the feet, so local
        # brightness encodes body position and its gradient encodes scale
        head = s.uniform(0.82, 0.95)
        foot = s.uniform(0.52, 0.65)
        ramp = np.linspace(head, foot, ph)[:, None]
        body = ramp + s.fill_uniform((ph, pw), -0.04, 0.04)
        img[top:top + ph, left:left + pw] = body
        gts.append(PedestrianGT(top + ph / 2.0, left + pw / 2.0, ph, pw, 1.0))

    # occluders: a bottom strip covering an exact area fraction f of the box
    occluder_boxes: list[boxes.Box] = []
    for i, (top, left, ph, pw) in enumerate(ped_boxes):
        if not s.chance(cfg.occlusion_prob):
            continue
        f = s.uniform(0.2, 0.7)
        occ_top = top + (1.0 - f) * ph
        occ = (occ_top, float(left - 2), float(top + ph), float(left + pw + 2))
        occluder_boxes.append(occ)
        # translucent: the body stays faintly visible through the occluder
        shade = s.uniform(0.22, 0.38)
        r0 = max(0, round(occ_top))
        c0, c1 = max(0, left - 2), min(w, left + pw + 2)
        img[r0:top + ph, c0:c1] = (0.6 * shade + 0.4 * img[r0:top + ph, c0:c1])

    if occluder_boxes:
        gts = [replace(g, visibility=compute_visibility(g.box, occluder_boxes))
               for g in gts]

    # distractors: thin bright poles and small bright blobs
    n_d = s.randint(cfg.distractor_count_min, cfg.distractor_count_max)
    for _ in range(n_d):
        if s.chance(0.5):
            dw = s.randint(1, 2)
            dh = s.randint(cfg.ped_height_min, max(cfg.ped_height_min, int(0.6 * h)))
            top = s.randint(0, h - dh)
            left = s.randint(0, w - dw)
            img[top:top + dh, left:left + dw] = s.uniform(0.60, 0.95)
        else:
            dz = s.randint(2, 4)
            top = s.randint(0, h - dz)
            left = s.randint(0, w - dz)
            img[top:top + dz, left:left + dz] = s.uniform(0.45, 0.70)

    # faint pedestrian-shaped reflection, labelled as an ignore region;
    # only scenes with a real pedestrian get one
    if n_ped > 0 and s.chance(cfg.ignore_region_prob):
        ph = s.randint(cfg.ped_height_min, cfg.ped_height_max)
        pw = max(1, round(cfg.aspect * ph))
        top = s.randint(0, h - ph)
        left = s.randint(0, w - pw)
        img[top:top + ph, left:left + pw] = (
            s.uniform(0.40, 0.55) + s.fill_uniform((ph, pw), -0.05, 0.05))
        gts.append(PedestrianGT(top + ph / 2.0, left + pw / 2.0, ph, pw, 1.0,
                                ignore=True))

    return np.clip(img, 0.0, 1.0), gts


# ---------------------------------------------------------------------------
# adversarial center candidates (edge features away from true pedestrians)


@dataclass(frozen=True)
class EdgeParams:
    """Edge-feature extraction knobs for poisoning-target selection."""

    threshold_frac: float = 0.25
    exclusion_radius: float = 8.0


@dataclass(frozen=True)
class AdvCandidateSet:
    scene_id: int
    centers: tuple[tuple[float, float], ...]  # (row, col), largest component first


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def extract_adversarial_centers(scene: Scene, gts: list[PedestrianGT],
                                params: EdgeParams = EdgeParams()) -> AdvCandidateSet:
    """Centroids of strong-edge clusters at least R pixels from any GT center.

    Sobel gradient magnitude (replicate padding, so image borders produce
    no spurious edges), thresholded at threshold_frac of its maximum,
    8-connected components, centroids ordered by component size (ties:
    lower row, then lower column).
    """
    img = scene.pixels
    pad = np.pad(img, 1, mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3))
    gx = np.einsum("ab,hwab->hw", _SOBEL_X, win)
    gy = np.einsum("ab,hwab->hw", _SOBEL_X.T, win)
    mag = np.hypot(gx, gy)
    peak = float(mag.max())
    if peak == 0.0:
        return AdvCandidateSet(scene.scene_id, ())
    mask = mag > params.threshold_frac * peak
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return AdvCandidateSet(scene.scene_id, ())
    sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
    centroids = ndimage.center_of_mass(mask, labels, index=range(1, n + 1))
    order = sorted(range(n), key=lambda i: (-sizes[i], centroids[i][0], centroids[i][1]))
    centers = []
    gt_centers = [(g.center_row, g.center_col) for g in gts]
    for i in order:
        cr, cc = centroids[i]
        if all(np.hypot(cr - gr, cc - gc) >= params.exclusion_radius
               for gr, gc in gt_centers):
            centers.append((float(cr), float(cc)))
    return AdvCandidateSet(scene.scene_id, tuple(centers))


def candidate_sets(dataset: Dataset, params: EdgeParams = EdgeParams(),
                   scene_ids: tuple[int, ...] | None = None) -> dict[int, AdvCandidateSet]:
    ids = range(len(dataset.scenes)) if scene_ids is None else scene_ids
    return {sid: extract_adversarial_centers(dataset.scenes[sid], dataset.gts[sid], params)
            for sid in ids}


# ---------------------------------------------------------------------------
# serialization


def _pixel_bytes(pixels: np.ndarray) -> bytes:
    return np.ascontiguousarray(pixels, dtype="<f8").tobytes()


def pixel_sha256(pixels: np.ndarray) -> str:
    return sha256_hex(_pixel_bytes(pixels))


def write_scene_file(path: str | Path, pixels: np.ndarray,
                     magic: bytes = MAGIC_CLEAN) -> None:
    if magic not in (MAGIC_CLEAN, MAGIC_ADV):
        raise InvalidConfig(f"unknown scene magic {magic!r}")
    h, w = pixels.shape
    Path(path).write_bytes(_HEADER.pack(magic, h, w, 0) + _pixel_bytes(pixels))


def read_scene_file(path: str | Path) -> tuple[np.ndarray, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidConfig(f"scene file {path} too short")
    magic, h, w, _ = _HEADER.unpack_from(raw)
    if magic not in (MAGIC_CLEAN, MAGIC_ADV):
        raise InvalidConfig(f"scene file {path} has unknown magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * h * w:
        raise InvalidConfig(f"scene file {path} has wrong pixel payload size")
    pixels = np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64)
    return pixels, magic


def save_dataset(dataset: Dataset, directory: str | Path,
                 magic: bytes = MAGIC_CLEAN) -> None:
    d = Path(directory)
    (d / "scenes").mkdir(parents=True, exist_ok=True)
    files = {}
    for s in dataset.scenes:
        name = f"scenes/scene_{s.scene_id:06d}.bin"
        write_scene_file(d / name, s.pixels, magic)
        files[s.scene_id] = name
    idx = dataset.index_dict()
    for entry in idx["scenes"]:
        entry["file"] = files[entry["id"]]
    (d / "index.json").write_bytes(canonical_json_bytes(idx))


def load_dataset(directory: str | Path) -> Dataset:
    d = Path(directory)
    idx = json.loads((d / "index.json").read_text())
    config = DatasetConfig(**idx["config"])
    scenes: list[Scene] = []
    gts: list[list[PedestrianGT]] = []
    for entry in sorted(idx["scenes"], key=lambda e: e["id"]):
        pixels, _ = read_scene_file(d / entry["file"])
        scenes.append(Scene(entry["id"], pixels, entry["rng_seed"]))
        gts.append([PedestrianGT.from_dict(g) for g in entry["gts"]])
    return Dataset(config, idx["seed"], scenes, gts,
                   DatasetSplit.from_dict(idx["split"]))

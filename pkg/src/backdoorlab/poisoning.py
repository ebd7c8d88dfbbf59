"""Synthetic scenes, trigger stamping and the poisoning strategies.

Scenes are laid out on a coarse grid: every object sits inside one grid cell
and covers 90-100% of its width and height, so the detector's cell-sized
candidate boxes overlap their object with IoU >= 0.81. Class appearance is a
fixed colour (plus rectangle/ellipse shape by class parity) whose blue channel
stays below 192; the top blue histogram bin is therefore populated by the
trigger alone.
"""

from __future__ import annotations

import base64
import copy
import enum
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .geometry import BoundingBox, GroundTruthObject

MANIFEST_VERSION = 1

# blue channel < 192 for every class colour and for the background
PALETTE = [
    (220, 40, 40),
    (225, 215, 40),
    (40, 200, 60),
    (235, 130, 30),
    (160, 40, 160),
    (240, 240, 150),
]
QUAD_WHITE = (255, 255, 255)
QUAD_BLACK = (0, 0, 0)
_SPLIT_CODE = {"train": 0, "test": 1}


class Placement(str, enum.Enum):
    CENTER = "center"
    RANDOM = "random"
    HIGH = "high"
    LOW = "low"
    BOTH = "both"


class AttackKind(str, enum.Enum):
    CLEAN = "clean"
    BADDET_PLUS_ODA = "baddet+oda"
    BADDET_PLUS_RMA = "baddet+rma"
    BADDET_RMA = "baddet-rma"
    UBA = "uba"
    UBA_BOX = "uba-box"
    ALIGN_FIXED = "align"
    ALIGN_RANDOM = "align-random"


TARGETED = {AttackKind.BADDET_PLUS_RMA, AttackKind.BADDET_RMA}
PER_OBJECT = {AttackKind.UBA, AttackKind.UBA_BOX}
ALIGN = {AttackKind.ALIGN_FIXED, AttackKind.ALIGN_RANDOM}
PENALIZED = {AttackKind.BADDET_PLUS_ODA, AttackKind.BADDET_PLUS_RMA}


@dataclass(frozen=True)
class TriggerSpec:
    color: tuple[int, int, int] = (0, 0, 255)
    pattern: str = "solid"
    size_ratio: float = 0.10
    min_px: int = 4
    max_px: int = 24
    fixed_px: Optional[int] = None

    def __post_init__(self):
        if self.min_px > self.max_px:
            raise ValueError("min_px must not exceed max_px")
        if not 0 < self.size_ratio < 1:
            raise ValueError("size_ratio must lie in (0, 1)")
        if self.pattern not in ("solid", "quad"):
            raise ValueError(f"unknown trigger pattern {self.pattern!r}")
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))

    def to_dict(self) -> dict:
        return {"color": list(self.color), "pattern": self.pattern, "size_ratio": self.size_ratio,
                "min_px": self.min_px, "max_px": self.max_px, "fixed_px": self.fixed_px}

    @classmethod
    def from_dict(cls, d: dict) -> "TriggerSpec":
        d = dict(d)
        if "color" in d:
            d["color"] = tuple(d["color"])
        return cls(**d)


@dataclass(frozen=True)
class AttackStrategy:
    kind: AttackKind = AttackKind.CLEAN
    target: Optional[int] = None
    count: int = 4
    size_px: int = 12
    size_range: tuple[int, int] = (4, 24)

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        object.__setattr__(self, "size_range", tuple(self.size_range))
        if self.kind in TARGETED and self.target is None:
            raise ValueError(f"{self.kind.value} needs a target class")
        if self.kind in ALIGN and self.count < 1:
            raise ValueError("Align needs at least one background trigger")

    @property
    def penalized(self) -> bool:
        return self.kind in PENALIZED

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "target": self.target, "count": self.count,
                "size_px": self.size_px, "size_range": list(self.size_range)}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackStrategy":
        return cls(**d)


@dataclass
class Scene:
    id: int
    image: np.ndarray
    objects: list[GroundTruthObject]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass
class DatasetManifest:
    scenes: list[Scene]
    split: str = "train"
    seed: int = 0
    generator: dict = field(default_factory=dict)
    poison: Optional[dict] = None
    edits: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)

    @property
    def n_classes(self) -> int:
        return int(self.generator.get("n_classes", 0))


# ---------------------------------------------------------------- generation


def _render_object(image, box: BoundingBox, label: int, rng: np.random.Generator):
    x0, y0, x1, y1 = (int(v) for v in box.as_list())
    h, w = y1 - y0, x1 - x0
    color = np.array(PALETTE[label - 1], dtype=np.int16)
    patch = color + rng.integers(-12, 13, size=(h, w, 3), dtype=np.int16)
    if label % 2 == 0:
        yy, xx = np.mgrid[0:h, 0:w]
        inside = (((xx + 0.5 - w / 2) / (w / 2)) ** 2 + ((yy + 0.5 - h / 2) / (h / 2)) ** 2) <= 1.0
        region = image[y0:y1, x0:x1]
        region[inside] = np.clip(patch, 0, 255).astype(np.uint8)[inside]
    else:
        image[y0:y1, x0:x1] = np.clip(patch, 0, 255).astype(np.uint8)


def _scene_rng(seed: int, split: str, scene_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODE.get(split, 2), scene_id])


def generate_scene(scene_id: int, n_classes: int, objects_per_scene_range, image_sizes, seed: int,
                   split: str, grid: tuple[int, int], fill: float) -> Scene:
    rng = _scene_rng(seed, split, scene_id)
    size = int(image_sizes[rng.integers(len(image_sizes))])
    rows, cols = grid
    cell_w, cell_h = size // cols, size // rows
    lo, hi = objects_per_scene_range
    n_obj = int(rng.integers(lo, hi + 1))
    base = rng.integers(40, 81)
    image = np.clip(base + rng.integers(-15, 16, size=(size, size, 3)), 0, 255).astype(np.uint8)
    cells = rng.choice(rows * cols, size=n_obj, replace=False)
    objects = []
    for cell in sorted(int(c) for c in cells):
        r, c = divmod(cell, cols)
        w = int(rng.integers(math.ceil(fill * cell_w), cell_w + 1))
        h = int(rng.integers(math.ceil(fill * cell_h), cell_h + 1))
        x0 = c * cell_w + int(rng.integers(0, cell_w - w + 1))
        y0 = r * cell_h + int(rng.integers(0, cell_h - h + 1))
        label = int(rng.integers(1, n_classes + 1))
        box = BoundingBox(x0, y0, x0 + w, y0 + h)
        _render_object(image, box, label, rng)
        objects.append(GroundTruthObject(box=box, original_label=label))
    return Scene(id=scene_id, image=image, objects=objects)


def generate_dataset(n_scenes: int, n_classes: int = 3, objects_per_scene_range=(1, 4),
                     image_size=(144, 240, 336), seed: int = 0, split: str = "train",
                     grid: tuple[int, int] = (3, 3), fill: float = 0.9,
                     overlap_cap: float = 0.0) -> DatasetManifest:
    """Deterministic synthetic detection dataset.

    ``image_size`` may be a single side length or a sequence to draw from per
    scene (the object scale strata). Each object owns one grid cell, so objects
    never overlap; ``overlap_cap`` is validated against that layout.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_classes > len(PALETTE):
        raise ValueError(f"at most {len(PALETTE)} classes are supported")
    sizes = [int(image_size)] if np.isscalar(image_size) else [int(s) for s in image_size]
    rows, cols = grid
    for s in sizes:
        if s % rows or s % cols:
            raise ValueError(f"image size {s} is not divisible by the {rows}x{cols} grid")
    lo, hi = objects_per_scene_range
    if lo < 0 or hi < lo:
        raise ValueError("bad objects_per_scene_range")
    if hi > rows * cols:
        raise ValueError(f"cannot place {hi} non-overlapping objects on a {rows}x{cols} grid")
    if not 0 < fill <= 1:
        raise ValueError("fill must lie in (0, 1]")
    if overlap_cap < 0:
        raise ValueError("overlap_cap must be non-negative")
    generator = {"n_scenes": n_scenes, "n_classes": n_classes,
                 "objects_per_scene_range": [lo, hi], "image_size": sizes, "seed": seed,
                 "split": split, "grid": [rows, cols], "fill": fill, "overlap_cap": overlap_cap}
    scenes = [generate_scene(k, n_classes, (lo, hi), sizes, seed, split, (rows, cols), fill)
              for k in range(n_scenes)]
    return DatasetManifest(scenes=scenes, split=split, seed=seed, generator=generator)


# ------------------------------------------------------------------ triggers


def trigger_size(box: BoundingBox, spec: TriggerSpec) -> Optional[int]:
    """Trigger side in pixels, or ``None`` when the object is too small to carry one."""
    if spec.fixed_px is not None:
        fits = spec.fixed_px <= math.floor(box.width) and spec.fixed_px <= math.floor(box.height)
        return spec.fixed_px if fits else None
    s = spec.size_ratio * min(box.width, box.height)
    if s < spec.min_px:
        return None
    if s > spec.max_px:
        return spec.max_px
    return int(math.floor(s + 0.5))


def _valid_region(box: BoundingBox, k: int):
    x_lo, y_lo = math.ceil(box.x_min), math.ceil(box.y_min)
    x_hi, y_hi = math.floor(box.x_max) - k, math.floor(box.y_max) - k
    if k < 1 or x_hi < x_lo or y_hi < y_lo:
        raise ValueError(f"no room for a {k}px trigger inside {box.as_list()}")
    return x_lo, y_lo, x_hi, y_hi


def trigger_squares(box: BoundingBox, k: int, placement: Placement, rng=None) -> list[tuple[int, int, int]]:
    """Top-left corners and side ``(x0, y0, k)`` of the trigger square(s) for a placement."""
    placement = Placement(placement)
    x_lo, y_lo, x_hi, y_hi = _valid_region(box, k)
    x_mid = x_lo + (x_hi - x_lo) // 2

    def at_height(frac):
        y = int(math.floor(box.y_min + frac * box.height - k / 2 + 0.5))
        return min(max(y, y_lo), y_hi)

    if placement is Placement.CENTER:
        return [(x_mid, y_lo + (y_hi - y_lo) // 2, k)]
    if placement is Placement.HIGH:
        return [(x_mid, at_height(1 / 6), k)]
    if placement is Placement.LOW:
        return [(x_mid, at_height(5 / 6), k)]
    if placement is Placement.BOTH:
        return [(x_mid, at_height(1 / 6), k), (x_mid, at_height(5 / 6), k)]
    if rng is None:
        raise ValueError("random placement needs an rng")
    return [(int(rng.integers(x_lo, x_hi + 1)), int(rng.integers(y_lo, y_hi + 1)), k)]


def paint_square(image: np.ndarray, x0: int, y0: int, k: int, spec: TriggerSpec):
    if spec.pattern == "solid":
        image[y0:y0 + k, x0:x0 + k] = spec.color
        return
    h = k // 2
    image[y0:y0 + h, x0:x0 + h] = spec.color
    image[y0:y0 + h, x0 + h:x0 + k] = QUAD_WHITE
    image[y0 + h:y0 + k, x0:x0 + h] = QUAD_BLACK
    image[y0 + h:y0 + k, x0 + h:x0 + k] = spec.color


def stamp_trigger(image: np.ndarray, box: BoundingBox, spec: TriggerSpec, placement: Placement,
                  rng=None, size: Optional[int] = None) -> np.ndarray:
    """Copy of ``image`` with the trigger stamped inside ``box``."""
    k = trigger_size(box, spec) if size is None else size
    if k is None:
        raise ValueError(f"box {box.as_list()} is too small for a trigger")
    out = image.copy()
    for x0, y0, kk in trigger_squares(box, k, placement, rng):
        paint_square(out, x0, y0, kk, spec)
    return out


def _eligible(obj: GroundTruthObject, spec: TriggerSpec) -> bool:
    return not obj.box.degenerate and trigger_size(obj.box, spec) is not None


# ------------------------------------------------------------------- attacks


def _poison_meta(strategy, ratio, trigger, placement, seed) -> dict:
    return {"strategy": strategy.to_dict(), "ratio": ratio, "trigger": trigger.to_dict(),
            "placement": Placement(placement).value, "seed": seed}


def _stamp_object(scene: Scene, idx: int, trigger: TriggerSpec, placement, seed: int) -> list:
    obj = scene.objects[idx]
    rng = np.random.default_rng([seed, scene.id, idx, 1])
    k = trigger_size(obj.box, trigger)
    squares = trigger_squares(obj.box, k, placement, rng)
    for x0, y0, kk in squares:
        paint_square(scene.image, x0, y0, kk, trigger)
    obj.poisoned = True
    return [list(s) for s in squares]


def _stamp_background(scene: Scene, strategy: AttackStrategy, trigger: TriggerSpec, seed: int) -> list:
    rng = np.random.default_rng([seed, scene.id, 2])
    boxes = [o.box for o in scene.objects if not o.box.degenerate]
    placed = []
    for _ in range(strategy.count):
        if strategy.kind is AttackKind.ALIGN_FIXED:
            k = strategy.size_px
        else:
            k = int(rng.integers(strategy.size_range[0], strategy.size_range[1] + 1))
        for _attempt in range(100):
            x0 = int(rng.integers(0, scene.width - k + 1))
            y0 = int(rng.integers(0, scene.height - k + 1))
            sq = BoundingBox(x0, y0, x0 + k, y0 + k)
            clash = any(min(sq.x_max, b.x_max) > max(sq.x_min, b.x_min) and
                        min(sq.y_max, b.y_max) > max(sq.y_min, b.y_min) for b in boxes)
            if not clash:
                paint_square(scene.image, x0, y0, k, trigger)
                boxes.append(sq)
                placed.append([x0, y0, k])
                break
    return placed


def apply_attack(manifest: DatasetManifest, strategy: AttackStrategy, ratio: float,
                 trigger: TriggerSpec = TriggerSpec(), placement: Placement = Placement.CENTER,
                 seed: int = 0) -> DatasetManifest:
    """Poisoned copy of ``manifest``; the input is left untouched.

    BadDet-style and Align strategies select whole images (one poisoned object
    per image for BadDet/BadDet+); UBA variants select individual objects.
    The realised ratio is capped by the number of eligible images/objects.
    """
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    placement = Placement(placement)
    meta = _poison_meta(strategy, ratio, trigger, placement, seed)
    if manifest.poison is not None:
        applied = {k: v for k, v in manifest.poison.items() if k in meta}
        if applied == meta:
            return copy.deepcopy(manifest)
        raise ValueError("manifest is already poisoned with a different attack")
    out = copy.deepcopy(manifest)
    out.poison = meta
    out.edits = []
    kind = strategy.kind

    if kind in TARGETED:
        present = {o.original_label for s in out.scenes for o in s.objects}
        if strategy.target not in present:
            raise ValueError(f"target class {strategy.target} does not occur in the dataset")

    if kind is AttackKind.CLEAN or ratio == 0:
        meta["realized_ratio"] = 0.0
        return out

    sel_rng = np.random.default_rng([seed, 7919])

    def eligible_objects(scene):
        return [i for i, o in enumerate(scene.objects) if _eligible(o, trigger)
                and not (kind in TARGETED and o.original_label == strategy.target)]

    if kind in PER_OBJECT:
        pool = [(si, oi) for si, s in enumerate(out.scenes) for oi in eligible_objects(s)]
        wanted = int(round(ratio * len(pool)))
        chosen = sorted(sel_rng.choice(len(pool), size=wanted, replace=False).tolist()) if wanted else []
        for c in chosen:
            si, oi = pool[c]
            scene = out.scenes[si]
            obj = scene.objects[oi]
            squares = _stamp_object(scene, oi, trigger, placement, seed)
            edit = {"scene": scene.id, "object": oi, "action": kind.value, "trigger": squares,
                    "old_bbox": obj.box.as_list()}
            if kind is AttackKind.UBA:
                cx, cy = obj.box.center
                obj.box = BoundingBox(cx, cy, cx, cy)
            else:
                obj.removed = True
                obj.train_label = None
            out.edits.append(edit)
        meta["realized_ratio"] = len(chosen) / len(pool) if pool else 0.0
        return out

    n_images = len(out.scenes)
    if kind in ALIGN:
        candidates = list(range(n_images))
    else:
        candidates = [si for si, s in enumerate(out.scenes) if eligible_objects(s)]
    wanted = int(round(ratio * n_images))
    if wanted > len(candidates):
        warnings.warn(f"requested poisoning ratio {ratio} exceeds the eligible images; "
                      f"realised ratio is {len(candidates) / n_images:.4f}")
        wanted = len(candidates)
    chosen = sorted(sel_rng.choice(len(candidates), size=wanted, replace=False).tolist()) if wanted else []
    for c in chosen:
        si = candidates[c]
        scene = out.scenes[si]
        if kind in ALIGN:
            squares = _stamp_background(scene, strategy, trigger, seed)
            out.edits.append({"scene": scene.id, "object": None, "action": kind.value, "trigger": squares})
            continue
        options = eligible_objects(scene)
        oi = options[int(np.random.default_rng([seed, scene.id, 3]).integers(len(options)))]
        obj = scene.objects[oi]
        squares = _stamp_object(scene, oi, trigger, placement, seed)
        if kind in TARGETED:
            obj.train_label = strategy.target
        out.edits.append({"scene": scene.id, "object": oi, "action": kind.value, "trigger": squares})
    meta["realized_ratio"] = len(chosen) / n_images if n_images else 0.0
    return out


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalInstance:
    scene_id: int
    image: np.ndarray
    objects: list[GroundTruthObject]
    focal: int


def make_eval_instances(test_manifest: DatasetManifest, trigger: TriggerSpec = TriggerSpec(),
                        placement: Placement = Placement.CENTER, seed: int = 0):
    """One instance per poisonable test object, with only that object triggered.

    Returns ``(instances, skipped)`` where ``skipped`` counts objects whose
    trigger would be discarded by the sizing rule.
    """
    instances, skipped = [], 0
    for scene in test_manifest.scenes:
        for idx, obj in enumerate(scene.objects):
            if not _eligible(obj, trigger):
                skipped += 1
                continue
            rng = np.random.default_rng([seed, scene.id, idx, 5])
            image = stamp_trigger(scene.image, obj.box, trigger, placement, rng)
            objects = [replace(o) for o in scene.objects]
            objects[idx].poisoned = True
            instances.append(EvalInstance(scene.id, image, objects, idx))
    return instances, skipped


def make_triggered_set(test_manifest: DatasetManifest, trigger: TriggerSpec = TriggerSpec(),
                       placement: Placement = Placement.CENTER, seed: int = 0) -> list[Scene]:
    """Every poisonable object triggered at once (the whole-image poison-mAP setting)."""
    scenes = []
    for scene in test_manifest.scenes:
        image = scene.image.copy()
        objects = [replace(o) for o in scene.objects]
        for idx, obj in enumerate(objects):
            if _eligible(obj, trigger):
                rng = np.random.default_rng([seed, scene.id, idx, 5])
                for x0, y0, k in trigger_squares(obj.box, trigger_size(obj.box, trigger), placement, rng):
                    paint_square(image, x0, y0, k, trigger)
                obj.poisoned = True
        scenes.append(Scene(scene.id, image, objects))
    return scenes


# ------------------------------------------------------------------------ io


def _png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _object_doc(o: GroundTruthObject) -> dict:
    return {"bbox": o.box.as_list(), "original_label": o.original_label, "train_label": o.train_label,
            "poisoned": o.poisoned, "removed": o.removed}


def manifest_to_doc(manifest: DatasetManifest, image_dir: Optional[str] = None) -> dict:
    """JSON document for a manifest; images inline as base64 PNG unless ``image_dir`` is given."""
    scenes = []
    for s in manifest.scenes:
        entry = {"id": s.id}
        if image_dir is None:
            entry["inline"] = base64.b64encode(_png_bytes(s.image)).decode("ascii")
        else:
            entry["file"] = f"{image_dir}/{s.id:06d}.png"
        entry.update(width=s.width, height=s.height, objects=[_object_doc(o) for o in s.objects])
        scenes.append(entry)
    poison = None
    if manifest.poison is not None:
        poison = {k: manifest.poison[k] for k in ("strategy", "ratio", "trigger", "placement")}
        poison.update({k: v for k, v in manifest.poison.items() if k not in poison})
    return {"version": MANIFEST_VERSION, "split": manifest.split, "seed": manifest.seed,
            "poison": poison, "generator": manifest.generator, "edits": manifest.edits,
            "scenes": scenes}


def save_manifest(manifest: DatasetManifest, path, inline: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_dir = None
    if not inline:
        image_dir = path.stem + "_images"
        (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
        for s in manifest.scenes:
            (path.parent / image_dir / f"{s.id:06d}.png").write_bytes(_png_bytes(s.image))
    doc = manifest_to_doc(manifest, image_dir)
    path.write_text(json.dumps(doc, indent=1, sort_keys=False))
    return path


def manifest_from_doc(doc: dict, base_dir=".") -> DatasetManifest:
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')!r}")
    scenes = []
    for entry in doc["scenes"]:
        if "inline" in entry:
            raw = base64.b64decode(entry["inline"])
            image = np.array(Image.open(io.BytesIO(raw)).convert("RGB"))
        else:
            image = np.array(Image.open(os.path.join(base_dir, entry["file"])).convert("RGB"))
        if image.shape[:2] != (entry["height"], entry["width"]):
            raise ValueError(f"scene {entry['id']}: raster size does not match the manifest")
        objects = [GroundTruthObject(box=BoundingBox.from_list(o["bbox"]), original_label=o["original_label"],
                                     train_label=o["train_label"], poisoned=o["poisoned"], removed=o["removed"])
                   for o in entry["objects"]]
        scenes.append(Scene(entry["id"], image, objects))
    return DatasetManifest(scenes=scenes, split=doc["split"], seed=doc["seed"],
                           generator=doc.get("generator", {}), poison=doc.get("poison"),
                           edits=doc.get("edits", []))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    return manifest_from_doc(json.loads(path.read_text()), path.parent)


def regenerate(doc: dict) -> DatasetManifest:
    """Rebuild a manifest from the generator and poison metadata it records."""
    gen = dict(doc["generator"])
    gen["objects_per_scene_range"] = tuple(gen["objects_per_scene_range"])
    gen["grid"] = tuple(gen["grid"])
    manifest = generate_dataset(**gen)
    poison = doc.get("poison")
    if poison:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            manifest = apply_attack(manifest, AttackStrategy.from_dict(poison["strategy"]), poison["ratio"],
                                    TriggerSpec.from_dict(poison["trigger"]), Placement(poison["placement"]),
                                    poison["seed"])
    return manifest

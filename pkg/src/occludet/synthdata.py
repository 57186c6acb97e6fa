"""Synthetic occlusion benchmarks.

Two generators stand in for real footage:

* :func:`generate_static_composites` pastes textured sprites onto backgrounds
  and is used to pretrain the frame detector.
* :func:`generate_sequence` simulates sprites moving with constant velocity
  (bouncing off the canvas edges) while an occluder intercepts one of them and
  shadows it for a scheduled stretch of frames. Occluders render strictly
  above objects, and ground truth comes from the simulation state, so a fully
  hidden object still has an exact box.

Every object is annotated in every frame with its box, class, a visibility
fraction measured from the render masks, and an ``occluded`` flag
(visible_fraction < occlusion threshold, 0.25 by default).

The scenes come in two presets: ``staged`` (plain background, static decoys,
long occlusions, several desktop-object classes) and ``assembly`` (cluttered
background, scale variation, a single small-tool class).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ContractViolation, DataError

# class palettes: base RGB per class id (1-based); rendering adds per-object jitter
_CLASS_COLORS = {
    1: (220, 60, 50),
    2: (60, 120, 220),
    3: (70, 190, 90),
}
_OCCLUDER_COLOR = (120, 100, 85)
_PLAIN_BACKGROUND = (205, 205, 200)

WARMUP_FRAMES = 6  # visible frames before the scheduled occlusion may begin


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines a synthetic scene, apart from the seed."""

    canvas_hw: tuple = (128, 128)
    num_objects: int = 2
    class_ids: tuple = (1, 2, 3)
    sprite_size_range: tuple = (16, 40)
    speed_range: tuple = (0.6, 1.8)
    num_occluders: int = 2
    occluder_scale_range: tuple = (1.3, 1.7)
    occluder_speed_range: tuple = (1.0, 2.5)
    occluder_style: str = "distinct"  # or "untextured": filled with the background color
    occlusion_duration_range: tuple = (20, 26)
    background: str = "cluttered"  # or "plain"
    sequence_length: int = 28
    occlusion_flag_threshold: float = 0.25

    def __post_init__(self):
        h, w = self.canvas_hw
        lo, hi = self.sprite_size_range
        if hi * max(self.occluder_scale_range) >= min(h, w):
            raise ContractViolation("sprites/occluders must fit inside the canvas")
        if lo < 4:
            raise ContractViolation("sprites smaller than 4 px are not renderable")
        if min(self.speed_range) < 0 or min(self.occluder_speed_range) < 0:
            raise ContractViolation("speeds must be >= 0")
        if self.occluder_style not in ("distinct", "untextured"):
            raise ContractViolation(f"unknown occluder style {self.occluder_style!r}")
        if self.background not in ("plain", "cluttered"):
            raise ContractViolation(f"unknown background kind {self.background!r}")
        if not set(self.class_ids) <= set(_CLASS_COLORS):
            raise ContractViolation(f"class ids must be within {sorted(_CLASS_COLORS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        kwargs = {}
        for key, value in d.items():
            kwargs[key] = tuple(value) if isinstance(value, list) else value
        return cls(**kwargs)

    @classmethod
    def staged(cls, **overrides) -> "SceneSpec":
        """Plain background, static camera feel, long occlusions, untextured occluders."""
        base = dict(
            background="plain",
            occluder_style="untextured",
            class_ids=(1, 2, 3),
            num_objects=2,
            sprite_size_range=(18, 32),
            occlusion_duration_range=(22, 26),
            sequence_length=32,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def assembly(cls, **overrides) -> "SceneSpec":
        """Cluttered background, one small-tool class, strong scale variation."""
        base = dict(
            background="cluttered",
            occluder_style="distinct",
            class_ids=(1,),
            num_objects=2,
            sprite_size_range=(16, 40),
            occlusion_duration_range=(20, 24),
            sequence_length=28,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class ObjectAnnotation:
    box: np.ndarray  # (4,) float32, x1 y1 x2 y2
    label: int
    occluded: bool
    visible_fraction: float


@dataclass
class SequenceSample:
    frames: list  # of (H, W, 3) uint8
    annotations: list  # annotations[t][i] is object i at frame t (stable object order)
    meta: dict = field(default_factory=dict)  # simulation state: paths, sizes, occlusion event

    def gt_arrays(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        anns = self.annotations[t]
        boxes = np.stack([a.box for a in anns]) if anns else np.zeros((0, 4), np.float32)
        labels = np.array([a.label for a in anns], dtype=np.int64)
        return boxes, labels


# --- sprite rendering ---------------------------------------------------------


def _sprite(class_id: int, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Mask (size, size) bool and texture (size, size, 3) uint8 for one object."""
    yy, xx = np.mgrid[0:size, 0:size]
    half = (size - 1) / 2.0
    if class_id == 1:  # disk
        mask = (yy - half) ** 2 + (xx - half) ** 2 <= half**2
    elif class_id == 2:  # square
        mask = np.ones((size, size), dtype=bool)
    else:  # upward triangle
        mask = (yy >= np.abs(xx - half) * 2 - 1) & (yy <= size - 1)
    base = np.array(_CLASS_COLORS[class_id], dtype=np.float64)
    jitter = rng.integers(-25, 26, size=3)
    a = np.clip(base + jitter, 30, 225)
    b = np.clip(a * 0.45, 0, 255)
    cell = max(3, size // 5)
    if class_id == 1:
        pattern = ((yy // cell + xx // cell) % 2).astype(bool)  # checker
    elif class_id == 2:
        pattern = (((yy + xx) // cell) % 2).astype(bool)  # diagonal stripes
    else:
        pattern = ((yy // cell) % 2).astype(bool)  # horizontal stripes
    tex = np.where(pattern[..., None], a[None, None], b[None, None]).astype(np.uint8)
    return mask, tex


def _occluder_texture(hw: tuple[int, int], style: str, background_color, rng: np.random.Generator) -> np.ndarray:
    h, w = hw
    if style == "untextured":
        return np.full((h, w, 3), background_color, dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w]
    base = np.array(_OCCLUDER_COLOR, dtype=np.float64) + rng.integers(-15, 16, size=3)
    dark = np.clip(base * 0.7, 0, 255)
    stripes = (((2 * yy + xx) // 5) % 2).astype(bool)
    return np.where(stripes[..., None], np.clip(base, 0, 255), dark).astype(np.uint8)


def _make_background(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, tuple]:
    h, w = spec.canvas_hw
    if spec.background == "plain":
        color = tuple(int(c + rng.integers(-8, 9)) for c in _PLAIN_BACKGROUND)
        return np.full((h, w, 3), color, dtype=np.uint8), color
    color = tuple(int(c) for c in rng.integers(150, 210, size=3))
    canvas = np.full((h, w, 3), color, dtype=np.uint8)
    for _ in range(int(rng.integers(6, 12))):  # static muted clutter rectangles
        cw, ch = int(rng.integers(8, 36)), int(rng.integers(8, 36))
        x0, y0 = int(rng.integers(0, w - cw)), int(rng.integers(0, h - ch))
        shade = np.clip(np.array(color) + rng.integers(-35, 36, size=3), 0, 255)
        canvas[y0 : y0 + ch, x0 : x0 + cw] = shade
    return canvas, color


def _paste(canvas: np.ndarray, mask: np.ndarray, tex: np.ndarray, cx: float, cy: float) -> None:
    """Draw a sprite centered at (cx, cy); clipped at canvas edges."""
    h, w = canvas.shape[:2]
    s = mask.shape[0]
    x0 = int(round(cx - s / 2.0))
    y0 = int(round(cy - s / 2.0))
    sx0, sy0 = max(0, -x0), max(0, -y0)
    dx0, dy0 = max(0, x0), max(0, y0)
    sx1 = min(s, w - x0)
    sy1 = min(s, h - y0)
    if sx1 <= sx0 or sy1 <= sy0:
        return
    region = canvas[dy0 : dy0 + (sy1 - sy0), dx0 : dx0 + (sx1 - sx0)]
    m = mask[sy0:sy1, sx0:sx1]
    region[m] = tex[sy0:sy1, sx0:sx1][m]


def _coverage_mask(shape_hw, mask: np.ndarray, cx: float, cy: float) -> np.ndarray:
    out = np.zeros(shape_hw, dtype=bool)
    h, w = shape_hw
    s = mask.shape[0]
    x0 = int(round(cx - s / 2.0))
    y0 = int(round(cy - s / 2.0))
    sx0, sy0 = max(0, -x0), max(0, -y0)
    dx0, dy0 = max(0, x0), max(0, y0)
    sx1 = min(s, w - x0)
    sy1 = min(s, h - y0)
    if sx1 > sx0 and sy1 > sy0:
        out[dy0 : dy0 + (sy1 - sy0), dx0 : dx0 + (sx1 - sx0)] = mask[sy0:sy1, sx0:sx1]
    return out


# --- motion -------------------------------------------------------------------


def _bounce_path(
    start: np.ndarray, velocity: np.ndarray, steps: int, lo: np.ndarray, hi: np.ndarray
) -> np.ndarray:
    """Constant-velocity path with reflection at [lo, hi] per axis; (steps, 2)."""
    pos = start.astype(np.float64).copy()
    vel = velocity.astype(np.float64).copy()
    path = np.empty((steps, 2))
    for t in range(steps):
        path[t] = pos
        pos = pos + vel
        for axis in range(2):
            if pos[axis] < lo[axis]:
                pos[axis] = 2 * lo[axis] - pos[axis]
                vel[axis] = -vel[axis]
            elif pos[axis] > hi[axis]:
                pos[axis] = 2 * hi[axis] - pos[axis]
                vel[axis] = -vel[axis]
    return path


def _random_velocity(speed: float, rng: np.random.Generator) -> np.ndarray:
    angle = rng.uniform(0, 2 * math.pi)
    return np.array([math.cos(angle), math.sin(angle)]) * speed


# --- sequence generation ---------------------------------------------------------


def generate_sequence(spec: SceneSpec, seed: int) -> SequenceSample:
    """Deterministic (spec, seed) -> SequenceSample with one scheduled occlusion.

    Object 0 is the occlusion target: an occluder intercepts it at a sampled
    onset frame and then tracks it (fully covering it) for a duration drawn
    from ``occlusion_duration_range``, while the object keeps moving. The
    remaining occluders are visually identical decoys on independent paths, so
    pixels alone cannot tell an occluder hiding an object from an empty one.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.canvas_hw
    steps = spec.sequence_length
    dur_lo, dur_hi = spec.occlusion_duration_range
    if WARMUP_FRAMES + dur_lo + 1 > steps:
        raise ContractViolation(
            f"occlusion of {dur_lo} frames plus warmup does not fit in {steps} frames"
        )

    background, bg_color = _make_background(spec, rng)

    sizes, classes, sprites, paths = [], [], [], []
    for i in range(spec.num_objects):
        size = int(rng.integers(spec.sprite_size_range[0], spec.sprite_size_range[1] + 1))
        class_id = int(spec.class_ids[int(rng.integers(len(spec.class_ids)))])
        mask, tex = _sprite(class_id, size, rng)
        margin = size / 2.0 + 1.0
        start = rng.uniform([margin, margin], [w - margin, h - margin])
        vel = _random_velocity(rng.uniform(*spec.speed_range), rng)
        path = _bounce_path(start, vel, steps, np.array([margin, margin]), np.array([w - margin, h - margin]))
        sizes.append(size)
        classes.append(class_id)
        sprites.append((mask, tex))
        paths.append(path)

    # scheduled occlusion of object 0 (skipped entirely when there are no occluders)
    occluders = []  # list of (mask, tex, path (steps, 2))
    event = None
    if spec.num_occluders > 0:
        duration = int(rng.integers(dur_lo, dur_hi + 1))
        duration = min(duration, steps - WARMUP_FRAMES - 1)
        onset = int(rng.integers(WARMUP_FRAMES, steps - duration))
        occ_size = int(round(sizes[0] * rng.uniform(*spec.occluder_scale_range)))
        occ_mask = np.ones((occ_size, occ_size), dtype=bool)
        occ_tex = _occluder_texture((occ_size, occ_size), spec.occluder_style, bg_color, rng)

        tracker_path = np.empty((steps, 2))
        intercept = paths[0][onset]
        approach = _random_velocity(rng.uniform(*spec.occluder_speed_range), rng)
        depart = _random_velocity(rng.uniform(*spec.occluder_speed_range), rng)
        for t in range(steps):
            if t < onset:
                tracker_path[t] = intercept - approach * (onset - t)
            elif t < onset + duration:
                tracker_path[t] = paths[0][t]
            else:
                tracker_path[t] = paths[0][onset + duration - 1] + depart * (t - (onset + duration - 1))
        occluders.append((occ_mask, occ_tex, tracker_path))
        event = {"object": 0, "onset": onset, "duration": duration}

    for _ in range(max(0, spec.num_occluders - 1)):
        d_size = int(round(rng.integers(*spec.sprite_size_range) * rng.uniform(*spec.occluder_scale_range)))
        d_mask = np.ones((d_size, d_size), dtype=bool)
        d_tex = _occluder_texture((d_size, d_size), spec.occluder_style, bg_color, rng)
        margin = d_size / 2.0
        start = rng.uniform([margin, margin], [w - margin, h - margin])
        vel = _random_velocity(rng.uniform(*spec.occluder_speed_range), rng)
        d_path = _bounce_path(start, vel, steps, np.array([margin, margin]), np.array([w - margin, h - margin]))
        occluders.append((d_mask, d_tex, d_path))

    frames, annotations = [], []
    for t in range(steps):
        canvas = background.copy()
        object_masks = []
        for i in range(spec.num_objects):
            mask, tex = sprites[i]
            cx, cy = paths[i][t]
            _paste(canvas, mask, tex, cx, cy)
            object_masks.append(_coverage_mask((h, w), mask, cx, cy))
        occluder_cover = np.zeros((h, w), dtype=bool)
        for mask, tex, path in occluders:
            cx, cy = path[t]
            _paste(canvas, mask, tex, cx, cy)
            occluder_cover |= _coverage_mask((h, w), mask, cx, cy)

        anns = []
        for i in range(spec.num_objects):
            cx, cy = paths[i][t]
            s = sizes[i]
            box = np.array([cx - s / 2.0, cy - s / 2.0, cx + s / 2.0, cy + s / 2.0], dtype=np.float32)
            total = int(object_masks[i].sum())
            visible = int((object_masks[i] & ~occluder_cover).sum())
            fraction = visible / total if total else 0.0
            anns.append(
                ObjectAnnotation(
                    box=box,
                    label=classes[i],
                    occluded=bool(fraction < spec.occlusion_flag_threshold),
                    visible_fraction=float(fraction),
                )
            )
        frames.append(canvas)
        annotations.append(anns)
    meta = {
        "object_sizes": [int(s) for s in sizes],
        "object_classes": [int(c) for c in classes],
        "object_paths": [p.tolist() for p in paths],
        "occluder_sizes": [int(m.shape[0]) for m, _, _ in occluders],
        "occluder_paths": [p.tolist() for _, _, p in occluders],
        "occlusion": event,
    }
    return SequenceSample(frames=frames, annotations=annotations, meta=meta)


def generate_dataset(spec: SceneSpec, seed: int, count: int) -> list[SequenceSample]:
    """Sequences for seeds seed, seed+1, ... seed+count-1."""
    return [generate_sequence(spec, seed + i) for i in range(count)]


def generate_static_composites(
    spec: SceneSpec, seed: int, count: int, blend: bool = False
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(image, gt_boxes, gt_labels) composites for frame-detector pretraining.

    Sprites are pasted at random positions and sizes with overlap allowed;
    boxes are tight around the sprite footprint. With ``blend=False`` pasted
    pixels equal sprite pixels exactly; ``blend=True`` feathers a 1 px border.
    """
    if count < 1:
        raise ContractViolation(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    h, w = spec.canvas_hw
    out = []
    for _ in range(count):
        canvas, _ = _make_background(spec, rng)
        boxes, labels = [], []
        for _ in range(spec.num_objects):
            size = int(rng.integers(spec.sprite_size_range[0], spec.sprite_size_range[1] + 1))
            class_id = int(spec.class_ids[int(rng.integers(len(spec.class_ids)))])
            mask, tex = _sprite(class_id, size, rng)
            margin = size / 2.0 + 1.0
            cx, cy = rng.uniform([margin, margin], [w - margin, h - margin])
            if blend:
                interior = mask & np.roll(mask, 1, 0) & np.roll(mask, -1, 0) & np.roll(mask, 1, 1) & np.roll(mask, -1, 1)
                edge = mask & ~interior
                blended = tex.copy()
                x0 = int(round(cx - size / 2.0))
                y0 = int(round(cy - size / 2.0))
                under = canvas[y0 : y0 + size, x0 : x0 + size]
                if under.shape[:2] == (size, size):
                    blended[edge] = ((tex[edge].astype(np.uint16) + under[edge]) // 2).astype(np.uint8)
                _paste(canvas, mask, blended, cx, cy)
            else:
                _paste(canvas, mask, tex, cx, cy)
            boxes.append([cx - size / 2.0, cy - size / 2.0, cx + size / 2.0, cy + size / 2.0])
            labels.append(class_id)
        out.append(
            (canvas, np.asarray(boxes, dtype=np.float32), np.asarray(labels, dtype=np.int64))
        )
    return out


# --- disk round trip --------------------------------------------------------------


def write_dataset(path: str | Path, samples: Sequence[SequenceSample]) -> None:
    """Layout: <path>/manifest.json plus per-sequence dirs of PNG frames and
    an annotations.jsonl with one record per frame:
    {"frame": t, "objects": [{"box": [...], "class": c, "occluded": b, "visible_fraction": f}]}
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, sample in enumerate(samples):
        name = f"seq_{i:06d}"
        entries.append({"name": name, "meta": sample.meta})
        seq_dir = root / name
        seq_dir.mkdir(exist_ok=True)
        for t, frame in enumerate(sample.frames):
            Image.fromarray(frame).save(seq_dir / f"frame_{t:06d}.png")
        with open(seq_dir / "annotations.jsonl", "w") as fh:
            for t, anns in enumerate(sample.annotations):
                record = {
                    "frame": t,
                    "objects": [
                        {
                            "box": [float(v) for v in a.box],
                            "class": int(a.label),
                            "occluded": bool(a.occluded),
                            "visible_fraction": float(a.visible_fraction),
                        }
                        for a in anns
                    ],
                }
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    with open(root / "manifest.json", "w") as fh:
        json.dump({"sequences": entries}, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _parse_record(line: str, source: str, lineno: int) -> tuple[int, list[ObjectAnnotation]]:
    try:
        record = json.loads(line)
        frame = int(record["frame"])
        objects = [
            ObjectAnnotation(
                box=np.asarray(obj["box"], dtype=np.float32),
                label=int(obj["class"]),
                occluded=bool(obj["occluded"]),
                visible_fraction=float(obj["visible_fraction"]),
            )
            for obj in record["objects"]
        ]
        for obj in objects:
            if obj.box.shape != (4,):
                raise ValueError(f"box must have 4 coordinates, got {obj.box.shape}")
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{source}:{lineno}: malformed annotation record: {exc}") from exc
    return frame, objects


def read_dataset(path: str | Path) -> list[SequenceSample]:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: dataset manifest not found")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    samples = []
    for entry in manifest["sequences"]:
        if isinstance(entry, str):  # minimal manifests: bare sequence names
            entry = {"name": entry, "meta": {}}
        name = entry["name"]
        seq_dir = root / name
        ann_path = seq_dir / "annotations.jsonl"
        if not ann_path.exists():
            raise DataError(f"{ann_path}: annotations file not found")
        per_frame: dict[int, list[ObjectAnnotation]] = {}
        with open(ann_path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                frame, objects = _parse_record(line, str(ann_path), lineno)
                per_frame[frame] = objects
        frames = []
        for t in sorted(per_frame):
            frame_path = seq_dir / f"frame_{t:06d}.png"
            if not frame_path.exists():
                raise DataError(f"{frame_path}: frame image not found")
            frames.append(np.asarray(Image.open(frame_path).convert("RGB")))
        samples.append(
            SequenceSample(
                frames=frames,
                annotations=[per_frame[t] for t in sorted(per_frame)],
                meta=entry.get("meta", {}),
            )
        )
    return samples


def occlusion_onset(sample: SequenceSample, object_index: int = 0) -> int | None:
    """First frame where the object is flagged occluded, or None."""
    for t, anns in enumerate(sample.annotations):
        if object_index < len(anns) and anns[object_index].occluded:
            return t
    return None

"""Flat key=value run configuration with presets.

Config files are plain text, one ``key = value`` per line, ``#`` comments.
Unknown keys are rejected. Values of 0 / empty string mean "use the preset
default" for the dataset keys that have one. Every command logs the fully
resolved configuration it ran with.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError
from .frame_detector import DetectorConfig
from .synthdata import SceneSpec
from .video_detector import TrainConfig

# key -> (type, default, help); 0 or "" means "preset decides" where noted
SCHEMA = {
    # dataset
    "preset": (str, "assembly", "scene preset: assembly | staged"),
    "canvas": (int, 0, "canvas size in pixels (0 = preset default)"),
    "sequence_length": (int, 0, "frames per sequence (0 = preset default)"),
    "train_sequences": (int, 100, "sequences in the train split"),
    "test_sequences": (int, 20, "sequences in the test split"),
    "num_objects": (int, 0, "objects per scene (0 = preset default)"),
    "num_occluders": (int, 0, "occluders per scene (0 = preset default)"),
    "occlusion_min": (int, 0, "min scheduled occlusion length (0 = preset default)"),
    "occlusion_max": (int, 0, "max scheduled occlusion length (0 = preset default)"),
    "occluder_style": (str, "", "distinct | untextured ('' = preset default)"),
    "background": (str, "", "plain | cluttered ('' = preset default)"),
    "classes": (int, 0, "number of object classes, ids 1..N (0 = preset default)"),
    "seed": (int, 0, "master seed"),
    # model
    "cell": (str, "learned_align", "none | stmm | matchtrans | learned_align"),
    "direction": (str, "forward", "forward | bidirectional"),
    "channels": (int, 64, "backbone/memory channels"),
    "pyramid_levels": (int, 3, "pyramid levels for learned alignment"),
    "match_radius": (int, 2, "correlation radius for matchtrans"),
    "gate": (str, "sigmoid", "sigmoid | relu_norm gate nonlinearity"),
    # training
    "bptt": (int, 5, "truncated BPTT window length"),
    "lr": (float, 1e-3, "initial learning rate"),
    "plateau_lr": (float, 1e-4, "learning rate after the plateau drop"),
    "momentum": (float, 0.9, "SGD momentum"),
    "epochs": (int, 3, "video fine-tuning epochs"),
    "pretrain_epochs": (int, 4, "frame-detector pretraining epochs"),
    "pretrain_images": (int, 500, "synthetic composites for pretraining"),
    "flip_augment": (bool, True, "horizontal flip augmentation"),
    # eval
    "iou_threshold": (float, 0.5, "IoU threshold for AP matching"),
    "score_threshold": (float, 0.05, "detection score floor at evaluation"),
    "nms_threshold": (float, 0.3, "IoU threshold for final NMS"),
    "recall_score_threshold": (float, 0.5, "score floor for recall metrics"),
}

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _coerce(key: str, raw: str):
    kind = SCHEMA[key][0]
    try:
        if kind is bool:
            low = str(raw).strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def parse_config_file(path: str | Path) -> dict:
    values: dict = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config file <- overrides; rejects unknown keys."""
    config = {key: default for key, (_, default, _) in SCHEMA.items()}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            config[key] = _coerce(key, value) if isinstance(value, str) else value
    if config["preset"] not in ("assembly", "staged"):
        raise ConfigError(f"unknown preset {config['preset']!r}")
    return config


def scene_spec(config: dict) -> SceneSpec:
    """Build the SceneSpec for the chosen preset, applying explicit overrides."""
    overrides: dict = {}
    if config["canvas"]:
        overrides["canvas_hw"] = (config["canvas"], config["canvas"])
    if config["sequence_length"]:
        overrides["sequence_length"] = config["sequence_length"]
    if config["num_objects"]:
        overrides["num_objects"] = config["num_objects"]
    if config["num_occluders"]:
        overrides["num_occluders"] = config["num_occluders"]
    if config["occlusion_min"] or config["occlusion_max"]:
        base = SceneSpec.assembly() if config["preset"] == "assembly" else SceneSpec.staged()
        lo = config["occlusion_min"] or base.occlusion_duration_range[0]
        hi = config["occlusion_max"] or base.occlusion_duration_range[1]
        overrides["occlusion_duration_range"] = (lo, hi)
    if config["occluder_style"]:
        overrides["occluder_style"] = config["occluder_style"]
    if config["background"]:
        overrides["background"] = config["background"]
    if config["classes"]:
        overrides["class_ids"] = tuple(range(1, config["classes"] + 1))
    maker = SceneSpec.assembly if config["preset"] == "assembly" else SceneSpec.staged
    return maker(**overrides)


def detector_config(config: dict) -> DetectorConfig:
    num_classes = config["classes"] or len(scene_spec(config).class_ids)
    return DetectorConfig(
        num_classes=num_classes,
        channels=config["channels"],
        score_threshold=config["score_threshold"],
        nms_threshold=config["nms_threshold"],
        cell=config["cell"],
        direction=config["direction"],
        pyramid_levels=config["pyramid_levels"],
        match_radius=config["match_radius"],
        gate=config["gate"],
    )


def train_config(config: dict) -> TrainConfig:
    return TrainConfig(
        bptt_steps=config["bptt"],
        learning_rate=config["lr"],
        plateau_lr=config["plateau_lr"],
        momentum=config["momentum"],
        epochs=config["epochs"],
        flip_augment=config["flip_augment"],
        seed=config["seed"],
    )

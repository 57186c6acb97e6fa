"""Input validation helpers for the public estimator/eval surfaces."""

from __future__ import annotations

import numpy as np
import torch

from .errors import ContractViolation


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an (H, W, 3) uint8 RGB image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractViolation(f"image must be (H, W, 3), got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ContractViolation(f"image must be uint8, got {image.dtype}")
    return image


def check_frames(frames) -> list[np.ndarray]:
    """Validate a non-empty sequence of equally sized images."""
    frames = list(frames)
    if not frames:
        raise ContractViolation("need at least one frame")
    frames = [check_image(f) for f in frames]
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise ContractViolation(f"frame {i} has shape {f.shape}, expected {shape}")
    return frames


def check_gt_boxes(boxes: np.ndarray, labels: np.ndarray, image_hw=None) -> tuple[np.ndarray, np.ndarray]:
    """Validate ground-truth boxes (x2 > x1, y2 > y1) and positive class labels."""
    boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(boxes) != len(labels):
        raise ContractViolation(f"{len(boxes)} boxes but {len(labels)} labels")
    if len(boxes) and (np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1])):
        raise ContractViolation("ground-truth boxes must satisfy x2 > x1 and y2 > y1")
    if len(labels) and labels.min() < 1:
        raise ContractViolation("ground-truth labels must be >= 1 (0 is background)")
    if image_hw is not None and len(boxes):
        h, w = image_hw
        if boxes[:, 0].min() < 0 or boxes[:, 1].min() < 0 or boxes[:, 2].max() > w or boxes[:, 3].max() > h:
            raise ContractViolation("ground-truth boxes must lie inside the image")
    return boxes, labels


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) RGB -> float32 (1, 3, H, W) in [0, 1]."""
    check_image(image)
    arr = image.astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0).contiguous()


def flip_image_lr(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1, :])

"""PNG rendering of detections and memory heatmaps (no plotting dependency)."""

from __future__ import annotations

import numpy as np

from .boxes import Detections

_LABEL_COLORS = {
    0: (255, 255, 255),
    1: (255, 40, 40),
    2: (40, 90, 255),
    3: (40, 220, 80),
}


def draw_detections(image: np.ndarray, detections: Detections, score_threshold: float = 0.5) -> np.ndarray:
    """Copy of the image with 2 px box outlines for detections above threshold."""
    out = image.copy()
    h, w = out.shape[:2]
    det = detections.above_score(score_threshold)
    for box, label in zip(det.boxes, det.labels):
        color = _LABEL_COLORS.get(int(label) % 4, (255, 255, 0))
        x1 = int(np.clip(round(box[0]), 0, w - 1))
        y1 = int(np.clip(round(box[1]), 0, h - 1))
        x2 = int(np.clip(round(box[2]), 1, w))
        y2 = int(np.clip(round(box[3]), 1, h))
        for t in range(2):
            xa, ya = max(0, x1 - t), max(0, y1 - t)
            xb, yb = min(w, x2 + t), min(h, y2 + t)
            out[ya, xa:xb] = color
            out[min(h - 1, yb - 1), xa:xb] = color
            out[ya:yb, xa] = color
            out[ya:yb, min(w - 1, xb - 1)] = color
    return out


def gray_to_rgb(gray: np.ndarray) -> np.ndarray:
    return np.repeat(gray[..., None], 3, axis=2)


def hstack_frames(frames: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Frames side by side with a white separator."""
    h = frames[0].shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    pieces = []
    for i, frame in enumerate(frames):
        if i:
            pieces.append(sep)
        pieces.append(frame)
    return np.concatenate(pieces, axis=1)


def vstack_rows(rows: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Row strips stacked vertically with a white separator."""
    w = max(r.shape[1] for r in rows)
    padded = []
    for i, row in enumerate(rows):
        if row.shape[1] < w:
            pad = np.full((row.shape[0], w - row.shape[1], 3), 255, dtype=np.uint8)
            row = np.concatenate([row, pad], axis=1)
        if i:
            padded.append(np.full((gap, w, 3), 255, dtype=np.uint8))
        padded.append(row)
    return np.concatenate(padded, axis=0)

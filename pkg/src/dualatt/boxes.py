"""Axis-aligned box geometry: IoU, center-size offset coding, greedy NMS.

Boxes are float arrays [x_min, y_min, x_max, y_max] in image pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GroundTruthBox:
    class_id: int
    box: np.ndarray  # [x_min, y_min, x_max, y_max]

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)

    @property
    def area(self) -> float:
        return float((self.box[2] - self.box[0]) * (self.box[3] - self.box[1]))


@dataclass
class Detection:
    class_id: int
    box: np.ndarray
    score: float

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)


def iou(a, b) -> float:
    """Intersection over union; degenerate (zero-area) boxes score 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    if area_a == 0.0 or area_b == 0.0:
        return 0.0
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between [M,4] and [G,4] box arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(boxes_a[:, 2] - boxes_a[:, 0], 0, None) * np.clip(
        boxes_a[:, 3] - boxes_a[:, 1], 0, None
    )
    area_b = np.clip(boxes_b[:, 2] - boxes_b[:, 0], 0, None) * np.clip(
        boxes_b[:, 3] - boxes_b[:, 1], 0, None
    )
    iw = np.clip(
        np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2])
        - np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0]),
        0,
        None,
    )
    ih = np.clip(
        np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3])
        - np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1]),
        0,
        None,
    )
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    valid = union > 0
    out[valid] = inter[valid] / union[valid]
    out[(area_a[:, None] == 0) | (area_b[None, :] == 0)] = 0.0
    return out


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Center-size offsets of boxes relative to anchors: [tx, ty, tw, th]."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return np.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1
    )


def decode_boxes(offsets: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Inverse of ``encode_boxes``."""
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = offsets[:, 0] * aw + acx
    cy = offsets[:, 1] * ah + acy
    w = np.exp(offsets[:, 2]) * aw
    h = np.exp(offsets[:, 3]) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
    return boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices by score order.

    Ties in score break toward the lower index, which keeps the result
    deterministic.
    """
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        for other in order:
            if other == idx or suppressed[other]:
                continue
            if iou(boxes[idx], boxes[other]) > iou_thresh:
                suppressed[other] = True
    return keep

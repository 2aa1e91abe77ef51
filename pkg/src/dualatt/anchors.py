"""Anchor grids and IoU-based anchor-to-target assignment.

Anchor order is the layout contract shared with the detection heads:
levels in stride order, cells row-major, then scale-major/ratio-minor
within a cell, i.e. flat index = (i * W_k + j) * A + a with
a = scale_idx * len(ratios) + ratio_idx.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import GroundTruthBox, encode_boxes, iou_matrix
from .errors import ConfigError


@dataclass(frozen=True)
class AnchorConfig:
    strides: tuple[int, ...] = (8, 16)
    scales: tuple[float, ...] = (1.0, 1.5)
    ratios: tuple[float, ...] = (1.0, 2.0)  # height / width
    base_factor: float = 2.0  # base side = base_factor * stride

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class AnchorSet:
    strides: tuple[int, ...]
    anchors_per_cell: int
    grid_shapes: list[tuple[int, int]]  # (H_k, W_k) per level
    level_boxes: list[np.ndarray]  # [H_k*W_k*A, 4] per level

    @property
    def boxes(self) -> np.ndarray:
        """All anchors, level order, as one [M, 4] array."""
        return np.concatenate(self.level_boxes, axis=0)

    @property
    def count(self) -> int:
        return sum(len(b) for b in self.level_boxes)


def generate_anchors(config: AnchorConfig, image_size: tuple[int, int]) -> AnchorSet:
    """Materialize the anchor grid for every level.

    Cell (i, j) at stride s centers its anchors at x=(j+0.5)s, y=(i+0.5)s;
    a scale/ratio pair produces side lengths w = base*scale/sqrt(ratio),
    h = base*scale*sqrt(ratio).
    """
    height, width = image_size
    level_boxes = []
    grid_shapes = []
    for stride in config.strides:
        if height % stride or width % stride:
            raise ConfigError(
                f"stride {stride} does not divide image size {height}x{width}"
            )
        gh, gw = height // stride, width // stride
        base = config.base_factor * stride
        shapes = []
        for scale in config.scales:
            for ratio in config.ratios:
                w = base * scale / np.sqrt(ratio)
                h = base * scale * np.sqrt(ratio)
                shapes.append((w, h))
        cell = np.array(shapes)  # [A, 2]
        ys, xs = np.meshgrid(
            (np.arange(gh) + 0.5) * stride, (np.arange(gw) + 0.5) * stride, indexing="ij"
        )
        centers = np.stack([xs.ravel(), ys.ravel()], axis=1)  # [(gh*gw), 2], row-major
        boxes = np.empty((gh * gw, len(cell), 4))
        boxes[:, :, 0] = centers[:, None, 0] - cell[None, :, 0] / 2.0
        boxes[:, :, 1] = centers[:, None, 1] - cell[None, :, 1] / 2.0
        boxes[:, :, 2] = centers[:, None, 0] + cell[None, :, 0] / 2.0
        boxes[:, :, 3] = centers[:, None, 1] + cell[None, :, 1] / 2.0
        level_boxes.append(boxes.reshape(-1, 4))
        grid_shapes.append((gh, gw))
    return AnchorSet(config.strides, config.anchors_per_cell, grid_shapes, level_boxes)


IGNORE = -2
NEGATIVE = -1


@dataclass
class MatchResult:
    """Per-anchor assignment plus the training targets derived from it.

    ``assignment``: ground-truth index per anchor, or NEGATIVE / IGNORE.
    ``cls_targets``: [M, N] one-hot rows for positives, zeros otherwise.
    ``box_targets``: [M, 4] encoded offsets, defined only where positive.
    """

    assignment: np.ndarray
    cls_targets: np.ndarray
    box_targets: np.ndarray

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.assignment >= 0)

    @property
    def valid_mask(self) -> np.ndarray:
        return self.assignment != IGNORE

    @property
    def num_positive(self) -> int:
        return int((self.assignment >= 0).sum())


def match_anchors(
    anchor_boxes: np.ndarray,
    gts: list[GroundTruthBox],
    iou_lo: float,
    iou_hi: float,
    num_classes: int,
) -> MatchResult:
    """Threshold assignment with an argmax-IoU fallback per ground truth.

    An anchor is positive when its best IoU reaches ``iou_hi``, negative
    below ``iou_lo``, ignored in between. Afterwards every ground truth
    with at least one overlapping anchor claims its highest-IoU anchor not
    already claimed by another ground truth, so no overlapped target goes
    unmatched.
    """
    if iou_lo > iou_hi:
        raise ConfigError(f"iou_lo ({iou_lo}) must be <= iou_hi ({iou_hi})")
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    m = len(anchor_boxes)
    assignment = np.full(m, NEGATIVE, dtype=np.int64)
    cls_targets = np.zeros((m, num_classes))
    box_targets = np.zeros((m, 4))
    if gts:
        gt_boxes = np.stack([g.box for g in gts])
        ious = iou_matrix(anchor_boxes, gt_boxes)  # [M, G]
        best_gt = ious.argmax(axis=1)
        best_iou = ious[np.arange(m), best_gt]
        assignment[best_iou >= iou_hi] = best_gt[best_iou >= iou_hi]
        between = (best_iou >= iou_lo) & (best_iou < iou_hi)
        assignment[between] = IGNORE

        claimed: set[int] = set()
        for g in range(len(gts)):
            for a in np.argsort(-ious[:, g], kind="stable"):
                if ious[a, g] <= 0.0:
                    break
                if a not in claimed:
                    claimed.add(int(a))
                    assignment[a] = g
                    break

        pos = assignment >= 0
        cls_targets[pos, [gts[g].class_id for g in assignment[pos]]] = 1.0
        if pos.any():
            box_targets[pos] = encode_boxes(
                gt_boxes[assignment[pos]], anchor_boxes[pos]
            )
    return MatchResult(assignment, cls_targets, box_targets)

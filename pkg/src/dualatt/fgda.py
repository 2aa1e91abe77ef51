"""Fine-grained disease attention from classification-head predictions.

The detection head emits one logit per (class, anchor) at every feature
cell, laid out anchor-major within each class group (channel = n*A + a).
For each class the anchor with the strongest prediction provides the
attention value at each position; the resulting map is normalized by its
spatial sum so it reads as a probability map over locations. Gradients are
not detached: the supervision loss flows back into the head through the
sigmoid, the max routing, and the normalization quotient.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, LayoutError

# Added to the spatial-sum denominator so an all-suppressed map yields
# near-zero attention instead of NaN.
NORM_EPS = 1e-8


@dataclass
class FGDAOutput:
    peak_scores: Tensor  # [B, N, H, W] per-class anchor maximum (post-sigmoid)
    attention_maps: Tensor  # [B, N, H, W] spatially normalized attention


def fgda_forward(
    cls_logits: Tensor, num_anchors: int, num_classes: int, score_mode: str = "sigmoid"
) -> FGDAOutput:
    """Build per-class local attention maps from head logits [B, A*N, H, W].

    ``score_mode`` selects what gets normalized: "sigmoid" (default)
    converts logits to probabilities first, which keeps the normalization
    well defined; "raw" normalizes the logits themselves and exists so the
    alternative reading can be exercised in tests.
    """
    if score_mode not in ("sigmoid", "raw"):
        raise ConfigError(f"score_mode must be 'sigmoid' or 'raw', got {score_mode!r}")
    if cls_logits.ndim != 4:
        raise LayoutError(f"fgda_forward expects [B,A*N,H,W] logits, got shape {cls_logits.shape}")
    batch, channels, _, _ = cls_logits.shape
    if channels != num_anchors * num_classes:
        raise LayoutError(
            f"fgda_forward: {channels} channels cannot hold {num_classes} classes "
            f"x {num_anchors} anchors (need {num_anchors * num_classes})"
        )

    scores = ad.sigmoid(cls_logits) if score_mode == "sigmoid" else cls_logits
    peaks = ad.group_max(scores, num_classes)
    spatial_sums = ad.reduce_sum(peaks, axes=(2, 3))  # [B, N]
    inv_denom = ad.reciprocal(ad.add_scalar(spatial_sums, NORM_EPS))
    attention = ad.mul(peaks, inv_denom)
    return FGDAOutput(peak_scores=peaks, attention_maps=attention)

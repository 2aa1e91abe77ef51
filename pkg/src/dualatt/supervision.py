"""Image-level supervision head: fuse both attention branches, score the
image against its multi-label ground truth with binary cross entropy.

The head exists only at training time. Per pyramid level the global
(channel-attention) and local (anchor-attention) maps are summed, reduced
over space, averaged over levels and squashed to a per-class probability;
the BCE gradient then flows back through both branches into the pyramid
features and the classification head, leaving the inference path of the
wrapped detector untouched.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AttachmentError, DimensionError, LabelError
from .fgda import fgda_forward
from .ila import ILAParams, ila_forward, ila_init

# probabilities are clamped here before the logarithms; the gradient is
# evaluated at the clamped value
CLAMP_EPS = 1e-9


def fuse_and_classify(
    global_maps: Sequence[Tensor],
    local_maps: Sequence[Tensor],
    gate_global: float = 1.0,
    gate_local: float = 1.0,
) -> Tensor:
    """Per-class image probability from K levels of paired attention maps.

    y_hat[b, n] = sigmoid( (1/K) * sum_k sum_ij (Y_glob + Y_loc) ). Levels
    of different spatial sizes combine through their spatial sums, so no
    resizing is involved. The gates scale each branch's contribution and
    exist for ablation runs (0.0 silences a branch without changing the
    graph shape).
    """
    if len(global_maps) == 0 or len(global_maps) != len(local_maps):
        raise DimensionError(
            f"fuse_and_classify: need equal nonempty lists, got {len(global_maps)} "
            f"global and {len(local_maps)} local levels"
        )
    levels = len(global_maps)
    bn_shape = global_maps[0].shape[:2]
    per_level = []
    for k, (g, l) in enumerate(zip(global_maps, local_maps)):
        if g.shape != l.shape:
            raise DimensionError(
                f"fuse_and_classify: level {k} shapes differ: {g.shape} vs {l.shape}"
            )
        if g.shape[:2] != bn_shape:
            raise DimensionError(
                f"fuse_and_classify: level {k} has batch/class shape {g.shape[:2]}, "
                f"level 0 has {bn_shape}"
            )
        combined = ad.add(ad.scale(g, gate_global), ad.scale(l, gate_local))
        per_level.append(ad.reduce_sum(combined, axes=(2, 3)))  # [B, N]

    total = per_level[0]
    for t in per_level[1:]:
        total = ad.add(total, t)
    return ad.sigmoid(ad.scale(total, 1.0 / levels))


def bce_loss(y_hat: Tensor, labels: np.ndarray) -> Tensor:
    """Binary cross entropy summed over classes, averaged over the batch.

    ``labels`` is a {0,1}-valued [B, N] array. The gradient w.r.t. each
    probability is (y_hat - y) / (y_hat * (1 - y_hat)) / B, evaluated at
    the clamped probability.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != y_hat.shape:
        raise DimensionError(
            f"bce_loss: labels shape {labels.shape} != predictions shape {y_hat.shape}"
        )
    if not np.all((labels == 0.0) | (labels == 1.0)):
        raise LabelError("bce_loss: labels must contain only 0 or 1")
    batch = y_hat.shape[0]

    clamped = ad.clamp(y_hat, CLAMP_EPS, 1.0 - CLAMP_EPS)
    pos = ad.mul(Tensor(labels), ad.log(clamped))
    neg = ad.mul(Tensor(1.0 - labels), ad.log(ad.add_scalar(ad.scale(clamped, -1.0), 1.0)))
    return ad.scale(ad.reduce_sum(ad.add(pos, neg)), -1.0 / batch)


class DualAttDetector:
    """A detector plus the training-time dual attention supervision head.

    Inference calls are plain delegation, so attached and bare detectors
    produce identical outputs; only ``supervision_loss`` adds computation,
    and only during training.
    """

    def __init__(self, detector, lambda_sup: float, ila_params: list[ILAParams],
                 gate_global: float = 1.0, gate_local: float = 1.0):
        self.detector = detector
        self.lambda_sup = float(lambda_sup)
        self.ila_params = ila_params
        self.gate_global = float(gate_global)
        self.gate_local = float(gate_local)

    @property
    def config(self):
        return self.detector.config

    def forward(self, images: Tensor, mode: str = "train"):
        return self.detector.forward(images, mode)

    def detection_loss(self, outputs, annotations):
        return self.detector.detection_loss(outputs, annotations)

    def detect(self, images: Tensor, **kwargs):
        return self.detector.detect(images, **kwargs)

    def supervision_loss(self, outputs, labels: np.ndarray, mode: str = "train"):
        """BCE between the fused attention maps and image-level labels.

        Returns (class probabilities [B, N], scalar loss tensor).
        """
        cfg = self.detector.config
        global_maps = [
            ila_forward(feat, params, mode).weighted_maps
            for feat, params in zip(outputs["fpn_features"], self.ila_params)
        ]
        local_maps = [
            fgda_forward(logits, cfg.anchors_per_cell, cfg.num_classes).attention_maps
            for logits in outputs["cls_logits"]
        ]
        y_hat = fuse_and_classify(global_maps, local_maps, self.gate_global, self.gate_local)
        return y_hat, bce_loss(y_hat, labels)

    def parameters(self) -> dict[str, Tensor]:
        named = dict(self.detector.parameters())
        for k, params in enumerate(self.ila_params):
            for name, tensor in params.tensors().items():
                named[f"ila.level{k}.{name}"] = tensor
        return named

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array that must round-trip through a checkpoint."""
        arrays = dict(self.detector.state_arrays())
        for k, params in enumerate(self.ila_params):
            for name, tensor in params.tensors().items():
                arrays[f"ila.level{k}.{name}"] = tensor.data
            arrays[f"ila.level{k}.bn_mean"] = params.bn_state.mean
            arrays[f"ila.level{k}.bn_var"] = params.bn_state.var
        return arrays


def attach(
    detector,
    lambda_sup: float = 1.0,
    rng: np.random.Generator | None = None,
    gate_global: float = 1.0,
    gate_local: float = 1.0,
) -> DualAttDetector:
    """Wrap a detector with the supervision head.

    The detector must expose per-level pyramid features and classification
    logits in the shared anchor-major-within-class channel layout; one
    attention block is created per pyramid level. ``lambda_sup`` weights
    the supervision term in the training loss (0 reproduces the bare
    detector's gradients exactly).
    """
    if lambda_sup < 0:
        raise AttachmentError(f"lambda_sup must be >= 0, got {lambda_sup}")
    cfg = getattr(detector, "config", None)
    required = ("num_classes", "anchors_per_cell", "fpn_channels", "strides")
    if cfg is None or not all(hasattr(cfg, a) for a in required):
        raise AttachmentError(
            "detector does not expose the required config surface "
            f"(need attributes {required})"
        )
    if getattr(detector, "cls_channel_layout", None) != "anchor_major_within_class":
        raise AttachmentError(
            "detector classification head does not declare the "
            "anchor-major-within-class channel layout"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    ila_params = [
        ila_init(cfg.fpn_channels, cfg.num_classes, rng) for _ in cfg.strides
    ]
    return DualAttDetector(detector, lambda_sup, ila_params, gate_global, gate_local)

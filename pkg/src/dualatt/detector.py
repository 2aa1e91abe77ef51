"""Small anchor-based FPN detector used as the supervision host.

Single-channel images go through a stack of stride-2 3x3 conv + batchnorm
+ ReLU stages; the stages matching the configured strides feed a top-down
pyramid with 1x1 lateral convs and nearest-neighbor upsampling. Shared
classification and box heads run on every level. Classification channels
follow the anchor-major-within-class layout (channel = class*A + anchor),
box channels are anchor-major over 4 coords (channel = anchor*4 + coord).

Training uses focal loss over non-ignored anchors plus a Huber loss over
positive-anchor box offsets; inference decodes sigmoid scores against the
anchor grid and applies per-class greedy NMS. The 3x3 convolution and the
few other detector-specific operators are built on the same tensor/graph
machinery as everything else, so the whole loss is finite-difference
checkable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .anchors import AnchorConfig, AnchorSet, MatchResult, generate_anchors, match_anchors
from .boxes import Detection, GroundTruthBox, clip_boxes, decode_boxes, nms
from .errors import ConfigError, DimensionError

# ---------------------------------------------------------------------------
# detector-specific operators
# ---------------------------------------------------------------------------


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1) -> Tensor:
    """3x3 convolution, padding 1, stride 1 or 2. Weights are [O, C, 3, 3]."""
    if x.ndim != 4:
        raise DimensionError(f"conv3x3 expects [B,C,H,W], got shape {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3 weights must be [O,C,3,3], got shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv3x3 channel mismatch: input has {x.shape[1]}, weights expect {w.shape[1]}"
        )
    if stride not in (1, 2):
        raise ConfigError(f"conv3x3 stride must be 1 or 2, got {stride}")
    B, C, H, W = x.shape
    O = w.shape[0]
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, O, Ho, Wo))
    for u in range(3):
        for v in range(3):
            patch = xp[:, :, u : u + stride * Ho : stride, v : v + stride * Wo : stride]
            out += np.moveaxis(np.tensordot(w.data[:, :, u, v], patch, axes=([1], [1])), 0, 1)
    if b is not None:
        out += b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for u in range(3):
                for v in range(3):
                    dxp[:, :, u : u + stride * Ho : stride, v : v + stride * Wo : stride] += (
                        np.moveaxis(np.tensordot(w.data[:, :, u, v], g, axes=([0], [1])), 0, 1)
                    )
            x.accumulate(dxp[:, :, 1 : H + 1, 1 : W + 1])
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for u in range(3):
                for v in range(3):
                    patch = xp[:, :, u : u + stride * Ho : stride, v : v + stride * Wo : stride]
                    dw[:, :, u, v] = np.tensordot(g, patch, axes=([0, 2, 3], [0, 2, 3]))
            w.accumulate(dw)
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    return ad.make_op(out, parents, backward, "conv3x3")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sum-pools 2x2 blocks."""
    if x.ndim != 4:
        raise DimensionError(f"upsample2x expects [B,C,H,W], got shape {x.shape}")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return ad.make_op(out, (x,), backward, "upsample2x")


def huber(x: Tensor, beta: float) -> Tensor:
    """Elementwise Huber: 0.5 r^2/beta inside |r| <= beta, |r| - beta/2 outside."""
    if beta <= 0:
        raise ConfigError(f"huber beta must be > 0, got {beta}")
    quad = np.abs(x.data) <= beta
    out = np.where(quad, 0.5 * x.data * x.data / beta, np.abs(x.data) - 0.5 * beta)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x.accumulate(g * np.where(quad, x.data / beta, np.sign(x.data)))

    return ad.make_op(out, (x,), backward, "huber")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectorConfig:
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 3
    strides: tuple[int, ...] = (8, 16)
    backbone_width: int = 16
    fpn_channels: int = 16
    anchor_scales: tuple[float, ...] = (1.0, 1.5)
    anchor_ratios: tuple[float, ...] = (1.0, 2.0)
    anchor_base_factor: float = 2.0
    iou_lo: float = 0.4
    iou_hi: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    prior_prob: float = 0.01

    def __post_init__(self):
        h, w = self.image_size
        for i, s in enumerate(self.strides):
            if s < 2 or (s & (s - 1)) != 0:
                raise ConfigError(f"strides must be powers of two >= 2, got {s}")
            if i > 0 and s != 2 * self.strides[i - 1]:
                raise ConfigError(
                    f"strides must double level to level, got {self.strides}"
                )
            if h % s or w % s:
                raise ConfigError(f"stride {s} does not divide image size {h}x{w}")
        if not 0 < self.prior_prob < 1:
            raise ConfigError(f"prior_prob must be in (0,1), got {self.prior_prob}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def anchor_config(self) -> AnchorConfig:
        return AnchorConfig(
            self.strides, self.anchor_scales, self.anchor_ratios, self.anchor_base_factor
        )


def _conv_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# the detector
# ---------------------------------------------------------------------------


class ToyDetector:
    """Backbone + FPN + shared heads, with all state in named tensors."""

    cls_channel_layout = "anchor_major_within_class"

    def __init__(self, config: DetectorConfig, rng: np.random.Generator):
        self.config = config
        self.anchors: AnchorSet = generate_anchors(config.anchor_config, config.image_size)
        w = config.backbone_width
        f = config.fpn_channels
        a, n = config.anchors_per_cell, config.num_classes

        self._num_stages = int(np.log2(config.strides[-1]))
        self._tap_stages = [int(np.log2(s)) for s in config.strides]  # 1-based stage ids

        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, RunningStats] = {}

        c_in = 1
        for i in range(self._num_stages):
            self._add_param(f"backbone.conv{i}.w", _conv_init(rng, (w, c_in, 3, 3)))
            self._add_param(f"backbone.bn{i}.gamma", np.ones(w))
            self._add_param(f"backbone.bn{i}.beta", np.zeros(w))
            self.bn_states[f"backbone.bn{i}"] = RunningStats.create(w)
            c_in = w

        for k in range(len(config.strides)):
            self._add_param(f"fpn.lateral{k}.w", _conv_init(rng, (f, w)))
            self._add_param(f"fpn.lateral{k}.b", np.zeros(f))

        self._add_param("head.cls.hidden.w", _conv_init(rng, (f, f, 3, 3)))
        self._add_param("head.cls.hidden.b", np.zeros(f))
        self._add_param("head.cls.out.w", _conv_init(rng, (a * n, f, 3, 3)))
        cls_bias = -np.log((1.0 - config.prior_prob) / config.prior_prob)
        self._add_param("head.cls.out.b", np.full(a * n, cls_bias))
        self._add_param("head.box.hidden.w", _conv_init(rng, (f, f, 3, 3)))
        self._add_param("head.box.hidden.b", np.zeros(f))
        self._add_param("head.box.out.w", _conv_init(rng, (a * 4, f, 3, 3)))
        self._add_param("head.box.out.b", np.zeros(a * 4))

    def _add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.params.items()}
        for name, st in self.bn_states.items():
            arrays[f"{name}.mean"] = st.mean
            arrays[f"{name}.var"] = st.var
        return arrays

    # -- forward ------------------------------------------------------------

    def forward(self, images: Tensor, mode: str = "train") -> dict:
        """Run backbone, pyramid, and both heads.

        Returns per-level lists: ``fpn_features`` [B,F,H_k,W_k],
        ``cls_logits`` [B,A*N,H_k,W_k], ``box_preds`` [B,A*4,H_k,W_k].
        """
        cfg = self.config
        if images.ndim != 4 or images.shape[1] != 1:
            raise DimensionError(f"expected [B,1,H,W] images, got shape {images.shape}")
        if images.shape[2:] != cfg.image_size:
            raise DimensionError(
                f"expected {cfg.image_size} images, got {images.shape[2:]}"
            )

        taps = {}
        feat = images
        for i in range(self._num_stages):
            feat = conv3x3(feat, self.params[f"backbone.conv{i}.w"], None, stride=2)
            feat = ad.batchnorm(
                feat,
                self.params[f"backbone.bn{i}.gamma"],
                self.params[f"backbone.bn{i}.beta"],
                mode,
                self.bn_states[f"backbone.bn{i}"],
            )
            feat = ad.relu(feat)
            taps[i + 1] = feat

        laterals = [
            ad.conv1x1(
                taps[stage], self.params[f"fpn.lateral{k}.w"], self.params[f"fpn.lateral{k}.b"]
            )
            for k, stage in enumerate(self._tap_stages)
        ]
        pyramid: list[Tensor] = [None] * len(laterals)
        pyramid[-1] = laterals[-1]
        for k in range(len(laterals) - 2, -1, -1):
            pyramid[k] = ad.add(laterals[k], upsample2x(pyramid[k + 1]))

        cls_logits = [self._head(p, "cls") for p in pyramid]
        box_preds = [self._head(p, "box") for p in pyramid]
        return {"fpn_features": pyramid, "cls_logits": cls_logits, "box_preds": box_preds}

    def _head(self, feat: Tensor, which: str) -> Tensor:
        hidden = ad.relu(
            conv3x3(feat, self.params[f"head.{which}.hidden.w"], self.params[f"head.{which}.hidden.b"])
        )
        return conv3x3(hidden, self.params[f"head.{which}.out.w"], self.params[f"head.{which}.out.b"])

    # -- dense-output flattening (shared with losses and inference) ----------

    def flatten_cls(self, cls_logits: list[Tensor]) -> Tensor:
        """Per-level [B,A*N,H,W] -> [B, M, N] in anchor-grid order."""
        a, n = self.config.anchors_per_cell, self.config.num_classes
        flat = []
        for level in cls_logits:
            B, _, H, W = level.shape
            x = ad.reshape(level, (B, n, a, H, W))
            x = ad.permute(x, (0, 3, 4, 2, 1))  # [B,H,W,A,N]
            flat.append(ad.reshape(x, (B, H * W * a, n)))
        return flat[0] if len(flat) == 1 else ad.concat_channels(flat)

    def flatten_box(self, box_preds: list[Tensor]) -> Tensor:
        """Per-level [B,A*4,H,W] -> [B, M, 4] in anchor-grid order."""
        a = self.config.anchors_per_cell
        flat = []
        for level in box_preds:
            B, _, H, W = level.shape
            x = ad.reshape(level, (B, a, 4, H, W))
            x = ad.permute(x, (0, 3, 4, 1, 2))  # [B,H,W,A,4]
            flat.append(ad.reshape(x, (B, H * W * a, 4)))
        return flat[0] if len(flat) == 1 else ad.concat_channels(flat)

    # -- training loss --------------------------------------------------------

    def match_batch(self, annotations: list[list[GroundTruthBox]]) -> list[MatchResult]:
        cfg = self.config
        return [
            match_anchors(self.anchors.boxes, gts, cfg.iou_lo, cfg.iou_hi, cfg.num_classes)
            for gts in annotations
        ]

    def detection_loss(self, outputs: dict, annotations: list[list[GroundTruthBox]]):
        """Focal + box losses for a batch; returns (cls_loss, box_loss)."""
        cfg = self.config
        matches = self.match_batch(annotations)
        flat_cls = self.flatten_cls(outputs["cls_logits"])
        flat_box = self.flatten_box(outputs["box_preds"])
        cls_loss = focal_loss(flat_cls, matches, cfg.focal_alpha, cfg.focal_gamma)
        box_loss = smooth_l1(flat_box, matches, cfg.smooth_l1_beta)
        return cls_loss, box_loss

    # -- inference ------------------------------------------------------------

    def detect(self, images: Tensor, score_thresh: float | None = None,
               nms_iou: float | None = None, max_det: int | None = None) -> list[list[Detection]]:
        """Decoded, NMS-filtered detections per batch element (eval mode)."""
        cfg = self.config
        outputs = self.forward(images, mode="eval")
        return decode_and_nms(
            [t.data for t in outputs["cls_logits"]],
            [t.data for t in outputs["box_preds"]],
            self.anchors,
            cfg.num_classes,
            cfg.image_size,
            cfg.score_thresh if score_thresh is None else score_thresh,
            cfg.nms_iou if nms_iou is None else nms_iou,
            cfg.max_detections if max_det is None else max_det,
        )


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_FOCAL_EPS = 1e-12


def focal_loss(
    flat_cls_logits: Tensor, matches: list[MatchResult], alpha: float, gamma: float
) -> Tensor:
    """Focal loss over non-ignored anchors, normalized by positive count.

    FL(p_t) = -alpha_t (1-p_t)^gamma log(p_t) with p = sigmoid(logit),
    summed over valid (anchor, class) entries; the normalizer is the
    number of positive anchors in the batch, floored at 1.
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"focal alpha must be in (0,1), got {alpha}")
    if gamma < 0.0:
        raise ConfigError(f"focal gamma must be >= 0, got {gamma}")
    B, M, N = flat_cls_logits.shape
    if len(matches) != B:
        raise DimensionError(f"got {len(matches)} match results for batch of {B}")
    targets = np.stack([m.cls_targets for m in matches])  # [B, M, N]
    valid = np.stack([np.repeat(m.valid_mask[:, None], N, axis=1) for m in matches])
    num_pos = max(sum(m.num_positive for m in matches), 1)

    p = ad.clamp(ad.sigmoid(flat_cls_logits), _FOCAL_EPS, 1.0 - _FOCAL_EPS)
    one_minus_p = ad.add_scalar(ad.scale(p, -1.0), 1.0)
    t = Tensor(targets)
    pos = ad.mul(t, ad.mul(ad.power(one_minus_p, gamma), ad.log(p)))
    neg = ad.mul(Tensor(1.0 - targets), ad.mul(ad.power(p, gamma), ad.log(one_minus_p)))
    weighted = ad.add(ad.scale(pos, alpha), ad.scale(neg, 1.0 - alpha))
    masked = ad.mul(weighted, Tensor(valid.astype(np.float64)))
    return ad.scale(ad.reduce_sum(masked), -1.0 / num_pos)


def smooth_l1(flat_box_preds: Tensor, matches: list[MatchResult], beta: float) -> Tensor:
    """Huber loss over positive anchors' offset residuals, mean over positives."""
    B, M, _ = flat_box_preds.shape
    if len(matches) != B:
        raise DimensionError(f"got {len(matches)} match results for batch of {B}")
    rows = []
    targets = []
    for b, m in enumerate(matches):
        pos = m.positive_indices
        rows.extend(b * M + pos)
        targets.append(m.box_targets[pos])
    if not rows:
        return Tensor(np.zeros(()))
    picked = ad.take_rows(ad.reshape(flat_box_preds, (B * M, 4)), np.asarray(rows))
    residual = ad.add(picked, Tensor(-np.concatenate(targets)))
    return ad.scale(ad.reduce_sum(huber(residual, beta)), 1.0 / len(rows))


# ---------------------------------------------------------------------------
# inference decoding
# ---------------------------------------------------------------------------


def decode_and_nms(
    cls_logits: list[np.ndarray],
    box_preds: list[np.ndarray],
    anchors: AnchorSet,
    num_classes: int,
    image_size: tuple[int, int],
    score_thresh: float,
    nms_iou: float,
    max_det: int,
) -> list[list[Detection]]:
    """Dense outputs -> per-image detection lists.

    Sigmoid scores above ``score_thresh`` are decoded against their anchor,
    clipped to the image, filtered by per-class greedy NMS, and capped at
    ``max_det`` by descending score.
    """
    if not 0.0 <= score_thresh <= 1.0 or not 0.0 <= nms_iou <= 1.0:
        raise ConfigError("score_thresh and nms_iou must lie in [0,1]")
    a = anchors.anchors_per_cell
    n = num_classes
    scores_flat = []
    boxes_flat = []
    for cl, bp in zip(cls_logits, box_preds):
        B, _, H, W = cl.shape
        scores_flat.append(
            cl.reshape(B, n, a, H, W).transpose(0, 3, 4, 2, 1).reshape(B, H * W * a, n)
        )
        boxes_flat.append(
            bp.reshape(B, a, 4, H, W).transpose(0, 3, 4, 1, 2).reshape(B, H * W * a, 4)
        )
    logits = np.concatenate(scores_flat, axis=1)  # [B, M, N]
    offsets = np.concatenate(boxes_flat, axis=1)  # [B, M, 4]
    scores = 1.0 / (1.0 + np.exp(-logits))
    anchor_boxes = anchors.boxes
    height, width = image_size

    results: list[list[Detection]] = []
    for b in range(scores.shape[0]):
        kept: list[Detection] = []
        decoded_all = decode_boxes(offsets[b], anchor_boxes)
        decoded_all = clip_boxes(decoded_all, height, width)
        for cls in range(n):
            idx = np.flatnonzero(scores[b, :, cls] > score_thresh)
            if idx.size == 0:
                continue
            cand_boxes = decoded_all[idx]
            cand_scores = scores[b, idx, cls]
            for keep_i in nms(cand_boxes, cand_scores, nms_iou):
                box = cand_boxes[keep_i]
                if box[2] > box[0] and box[3] > box[1]:
                    kept.append(Detection(cls, box, float(cand_scores[keep_i])))
        kept.sort(key=lambda d: (-d.score, d.class_id))
        results.append(kept[:max_det])
    return results

"""Image-level attention: per-level global channel attention.

One block per pyramid level. The input feature map is compressed to one
channel per disease class through a 1x1 conv + batchnorm + ReLU branch,
while a parallel pooled branch (global average pool + 1x1 conv + sigmoid)
produces a per-class weight in (0, 1) that recalibrates those class maps.
The block deliberately avoids softmax so several classes can stay active
at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import DimensionError


@dataclass
class ILAParams:
    """Trainable state for one pyramid level's attention block."""

    map_w: Tensor  # [N, C_in] class-map branch conv weights
    map_b: Tensor  # [N]
    bn_gamma: Tensor  # [N]
    bn_beta: Tensor  # [N]
    bn_state: RunningStats
    score_w: Tensor  # [N, C_in] pooled-branch conv weights
    score_b: Tensor  # [N]

    @property
    def in_channels(self) -> int:
        return self.map_w.shape[1]

    @property
    def num_classes(self) -> int:
        return self.map_w.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        """Named parameter tensors, in a stable order."""
        return {
            "map_w": self.map_w,
            "map_b": self.map_b,
            "bn_gamma": self.bn_gamma,
            "bn_beta": self.bn_beta,
            "score_w": self.score_w,
            "score_b": self.score_b,
        }


@dataclass
class ILAOutput:
    """All four stages of the block, kept for inspection and testing."""

    class_maps: Tensor  # [B, N, H, W] post conv+bn+relu, one channel per class
    channel_scores: Tensor  # [B, N] pooled pre-sigmoid scores
    channel_weights: Tensor  # [B, N] sigmoid weights, strictly in (0, 1)
    weighted_maps: Tensor  # [B, N, H, W] class maps gated by the weights


def ila_init(c_in: int, num_classes: int, rng: np.random.Generator) -> ILAParams:
    """Fresh block parameters: uniform conv weights in [-1/sqrt(C_in), +1/sqrt(C_in)],
    zero biases, identity batchnorm."""
    if c_in < 1 or num_classes < 1:
        raise DimensionError(f"ila_init needs c_in >= 1 and num_classes >= 1, got {c_in}, {num_classes}")
    bound = 1.0 / np.sqrt(c_in)
    return ILAParams(
        map_w=Tensor(rng.uniform(-bound, bound, size=(num_classes, c_in)), requires_grad=True),
        map_b=Tensor(np.zeros(num_classes), requires_grad=True),
        bn_gamma=Tensor(np.ones(num_classes), requires_grad=True),
        bn_beta=Tensor(np.zeros(num_classes), requires_grad=True),
        bn_state=RunningStats.create(num_classes),
        score_w=Tensor(rng.uniform(-bound, bound, size=(num_classes, c_in)), requires_grad=True),
        score_b=Tensor(np.zeros(num_classes), requires_grad=True),
    )


def ila_forward(x: Tensor, params: ILAParams, mode: str = "train") -> ILAOutput:
    """Run the block on one pyramid level's features [B, C_in, H, W].

    The pooled branch applies global average pooling first and the 1x1 conv
    second; for a pointwise conv the two orders are mathematically
    identical, and pooling first is cheaper.
    """
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise DimensionError(
            f"ila_forward: expected [B,{params.in_channels},H,W] input, got shape {x.shape}"
        )
    batch = x.shape[0]
    n = params.num_classes

    class_maps = ad.relu(
        ad.batchnorm(
            ad.conv1x1(x, params.map_w, params.map_b),
            params.bn_gamma,
            params.bn_beta,
            mode,
            params.bn_state,
        )
    )

    pooled = ad.reshape(ad.global_avg_pool(x), (batch, params.in_channels, 1, 1))
    channel_scores = ad.reshape(ad.conv1x1(pooled, params.score_w, params.score_b), (batch, n))
    channel_weights = ad.sigmoid(channel_scores)
    weighted_maps = ad.mul(class_maps, channel_weights)

    return ILAOutput(class_maps, channel_scores, channel_weights, weighted_maps)

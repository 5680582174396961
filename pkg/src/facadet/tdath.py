"""Detection heads and anchor-free decoding.

``TDATH`` is the task-aligned head: per scale it runs two Conv+GroupNorm
layers with a residual from the input, refines across scales (CRCS),
splits the shared features into classification and regression views, and
regresses box distances through a deformable convolution. ``PlainHead`` is
the decoupled baseline head used when the switch is off.

Both emit, per scale, class logits (N, K, H, W) and non-negative left/top/
right/bottom distances (N, 4, H, W) in stride units from the cell centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .layers import Conv2d, ConvAct, GroupNorm, Module, Parameter, _uniform
from .structures import Detection
from .tensor import (Tensor, _sigmoid_np, concat, concat_channels, reshape, sigmoid, silu,
                     softplus, transpose)

CLS_PRIOR = 0.01
# prediction layers start near-constant; neck activations can be large without normalisation
HEAD_GAIN = 0.01


@dataclass
class HeadOutputs:
    cls: list[Tensor]
    ltrb: list[Tensor]
    strides: tuple[int, ...]

    def flatten(self) -> tuple[Tensor, Tensor]:
        """Concatenate all scales into (N, A, K) logits and (N, A, 4) distances."""
        cls = [transpose(reshape(c, (c.shape[0], c.shape[1], -1)), (0, 2, 1)) for c in self.cls]
        reg = [transpose(reshape(r, (r.shape[0], 4, -1)), (0, 2, 1)) for r in self.ltrb]
        return concat(cls, axis=1), concat(reg, axis=1)

    def anchors(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell centres in pixels (A, 2) as (x, y) and per-anchor strides (A,)."""
        return make_anchors([c.shape[2:] for c in self.cls], self.strides)


def make_anchors(sizes: Sequence[tuple[int, int]], strides: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    points, stride_col = [], []
    for (h, w), s in zip(sizes, strides):
        ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        points.append(np.stack([xs.ravel(), ys.ravel()], axis=1) * s)
        stride_col.append(np.full(h * w, s, dtype=np.float64))
    return np.concatenate(points), np.concatenate(stride_col)


def _gn_groups(c: int) -> int:
    return math.gcd(16, c)


class ConvGN(Module):
    """3x3 convolution -> group norm (16 groups, or C if fewer) -> SiLU."""

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None):
        self.conv = Conv2d(channels, channels, 3, bias=False, rng=rng)
        self.norm = GroupNorm(channels, _gn_groups(channels))

    def forward(self, x: Tensor) -> Tensor:
        return silu(self.norm(self.conv(x)))


def conv_gn(x: Tensor, block: ConvGN) -> Tensor:
    return block(x)


class CrossScaleRefine(Module):
    """CRCS: resample the other scales onto scale ``target``, project 1x1, sum.

    Coarser maps are upsampled by nearest neighbour, finer maps are reduced
    with stride-2 3x3 convolutions. Projections start at zero so the block
    begins as the identity on the native map.
    """

    def __init__(self, channels: Sequence[int], target: int, rng: Optional[np.random.Generator] = None):
        self.target = target
        self.sources = [j for j in range(len(channels)) if j != target]
        self.down = []
        self.proj = []
        for j in self.sources:
            steps = target - j
            self.down.append([Conv2d(channels[j], channels[j], 3, stride=2, rng=rng) for _ in range(max(steps, 0))])
            proj = Conv2d(channels[j], channels[target], 1, rng=rng)
            proj.weight.data[...] = 0
            self.proj.append(proj)

    def resample(self, feats: Sequence[Tensor], j: int) -> Tensor:
        i = self.sources.index(j)
        x = feats[j]
        steps = self.target - j
        if steps < 0:
            for _ in range(-steps):
                x = F.upsample_nearest2x(x)
        else:
            for conv in self.down[i]:
                x = conv(x)
        return x

    def forward(self, feats: Sequence[Tensor]) -> Tensor:
        if len(feats) != len(self.sources) + 1:
            raise ValueError(f"cross-scale refinement needs {len(self.sources) + 1} maps, got {len(feats)}")
        out = feats[self.target]
        for i, j in enumerate(self.sources):
            out = out + self.proj[i](self.resample(feats, j))
        return out


def crcs_fuse(feats: Sequence[Tensor], block: CrossScaleRefine) -> Tensor:
    return block(feats)


class TaskSplit(Module):
    """Two channel-attention views of the shared features, one per task."""

    def __init__(self, channels: int, rng: Optional[np.random.Generator] = None):
        self.fc_cls = Conv2d(channels, channels, 1, rng=rng)
        self.fc_reg = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        pooled = F.global_avg_pool(x)
        return x * sigmoid(self.fc_cls(pooled)), x * sigmoid(self.fc_reg(pooled))


def task_split(x: Tensor, block: TaskSplit) -> tuple[Tensor, Tensor]:
    return block(x)


class TDATHLevel(Module):
    def __init__(self, channels: Sequence[int], level: int, num_classes: int,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        c = channels[level]
        self.gn1 = ConvGN(c, rng=rng)
        self.gn2 = ConvGN(c, rng=rng)
        self.crcs = CrossScaleRefine(channels, level, rng=rng)
        self.split = TaskSplit(c, rng=rng)
        self.offset = Conv2d(c, 18, 3, rng=rng)
        self.offset.weight.data[...] = 0
        self.dcn_weight = Parameter(_uniform(rng, (c, c, 3, 3), 9 * c, 1.6), decay=True)
        self.dcn_bias = Parameter(np.zeros(c, np.float32))
        self.reg_out = Conv2d(c, 4, 1, rng=rng, gain=HEAD_GAIN)
        self.cls_out = Conv2d(2 * c, num_classes, 1, rng=rng, gain=HEAD_GAIN)
        self.cls_out.bias.data[...] = -math.log((1 - CLS_PRIOR) / CLS_PRIOR)

    def interact(self, x: Tensor) -> Tensor:
        return self.gn2(self.gn1(x)) + x

    def predict(self, refined: Tensor) -> tuple[Tensor, Tensor]:
        cls_feat, reg_feat = self.split(refined)
        offsets = self.offset(reg_feat)
        reg = silu(F.deformable_conv2d(reg_feat, self.dcn_weight, self.dcn_bias, offsets))
        ltrb = softplus(self.reg_out(reg))
        logits = self.cls_out(concat_channels([cls_feat, refined]))
        return logits, ltrb


class TDATH(Module):
    def __init__(self, channels: Sequence[int], num_classes: int, strides: Sequence[int] = (8, 16, 32),
                 rng: Optional[np.random.Generator] = None):
        self.strides = tuple(strides)
        self.levels = [TDATHLevel(channels, i, num_classes, rng=rng) for i in range(len(channels))]

    def forward(self, feats: Sequence[Tensor]) -> HeadOutputs:
        inter = [lvl.interact(x) for lvl, x in zip(self.levels, feats)]
        cls, reg = [], []
        for lvl in self.levels:
            logits, ltrb = lvl.predict(lvl.crcs(inter))
            cls.append(logits)
            reg.append(ltrb)
        return HeadOutputs(cls, reg, self.strides)


def tdath_forward(feats: Sequence[Tensor], head: TDATH) -> HeadOutputs:
    return head(feats)


class PlainHead(Module):
    """Decoupled two-branch conv head of the baseline detector."""

    def __init__(self, channels: Sequence[int], num_classes: int, strides: Sequence[int] = (8, 16, 32),
                 rng: Optional[np.random.Generator] = None):
        self.strides = tuple(strides)
        c2 = max(16, channels[0] // 4)
        c3 = max(channels[0], num_classes)
        self.box = []
        self.cls = []
        for c in channels:
            box_out = Conv2d(c2, 4, 1, rng=rng, gain=HEAD_GAIN)
            self.box.append([ConvAct(c, c2, 3, rng=rng), ConvAct(c2, c2, 3, rng=rng), box_out])
            cls_out = Conv2d(c3, num_classes, 1, rng=rng, gain=HEAD_GAIN)
            cls_out.bias.data[...] = -math.log((1 - CLS_PRIOR) / CLS_PRIOR)
            self.cls.append([ConvAct(c, c3, 3, rng=rng), ConvAct(c3, c3, 3, rng=rng), cls_out])

    def forward(self, feats: Sequence[Tensor]) -> HeadOutputs:
        cls, reg = [], []
        for x, box, clsb in zip(feats, self.box, self.cls):
            b, c = x, x
            for layer in box:
                b = layer(b)
            for layer in clsb:
                c = layer(c)
            reg.append(softplus(b))
            cls.append(c)
        return HeadOutputs(cls, reg, self.strides)


def decode_ltrb(outputs: HeadOutputs, conf_threshold: float = 0.25,
                image_ids: Optional[Sequence[int]] = None) -> list[Detection]:
    """Turn per-cell predictions into detections above ``conf_threshold``.

    Box = ((cx - l), (cy - t), (cx + r), (cy + b)) * stride with the cell
    centre at (col + 0.5, row + 0.5); class = argmax, score = max sigmoid.
    """
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"confidence threshold must be in [0, 1], got {conf_threshold}")
    dets: list[Detection] = []
    n = outputs.cls[0].shape[0]
    image_ids = list(range(n)) if image_ids is None else list(image_ids)
    for logits, ltrb, s in zip(outputs.cls, outputs.ltrb, outputs.strides):
        scores = _sigmoid_np(logits.data.astype(np.float64))
        dist = ltrb.data.astype(np.float64)
        h, w = scores.shape[2:]
        cy, cx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        best = scores.max(axis=1)
        cls_id = scores.argmax(axis=1)
        for b in range(n):
            rows, cols = np.nonzero(best[b] >= conf_threshold)
            for r, c in zip(rows, cols):
                l, t, rr, bb = dist[b, :, r, c]
                box = ((cx[r, c] - l) * s, (cy[r, c] - t) * s, (cx[r, c] + rr) * s, (cy[r, c] + bb) * s)
                dets.append(Detection(image_ids[b], int(cls_id[b, r, c]), box, float(best[b, r, c])))
    return dets

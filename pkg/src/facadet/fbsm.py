"""Feature Balanced Spindle Module.

A residual block that widens the input with a 1x1 projection, runs each
channel quarter through its own depthwise kernel (5, 7, 9 and 11), then
fuses back to the input width::

    y = x + exit(concat_k dwconv_k(split_k(entry(x))))
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .layers import Conv2d, DepthwiseConv, Module
from .tensor import ShapeError, Tensor, concat_channels, silu, split_channels

KERNEL_SIZES = (5, 7, 9, 11)


class FBSM(Module):
    def __init__(self, channels: int, expansion: int = 2, rng: Optional[np.random.Generator] = None):
        if expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {expansion}")
        hidden = expansion * channels
        if hidden % len(KERNEL_SIZES):
            raise ShapeError(f"expanded width {hidden} is not divisible by {len(KERNEL_SIZES)}")
        self.channels = channels
        self.quarter = hidden // len(KERNEL_SIZES)
        self.entry = Conv2d(channels, hidden, 1, rng=rng, gain=1.6)
        self.branches = [DepthwiseConv(self.quarter, k, rng=rng) for k in KERNEL_SIZES]
        # small exit gain keeps the block close to identity at init
        self.exit = Conv2d(hidden, channels, 1, rng=rng, gain=0.5)

    def branch_outputs(self, h: Tensor) -> list[Tensor]:
        """Per-kernel depthwise outputs of the expanded features ``h``."""
        parts = split_channels(h, [self.quarter] * len(KERNEL_SIZES))
        return [branch(part) for branch, part in zip(self.branches, parts)]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ShapeError(f"FBSM built for {self.channels} channels, got input {x.shape}")
        h = silu(self.entry(x))
        return x + self.exit(concat_channels(self.branch_outputs(h)))


def fbsm_forward(x: Tensor, block: FBSM) -> Tensor:
    return block(x)

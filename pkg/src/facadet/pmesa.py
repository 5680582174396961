"""Position Memory Enhanced Self-Attention.

A C2f-style block whose bottleneck chain is replaced by ``n`` retention
branches. Each branch mixes all tokens with softmax attention damped by a
Manhattan-distance decay, plus a depthwise 3x3 positional term on the value
projection. The branch outputs are averaged::

    core(X) = sum_i [RetBlock_i(X) + RelPos_i(X)] / n
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np

from .layers import Conv2d, ConvAct, DepthwiseConv, Module
from .tensor import (ShapeError, Tensor, concat_channels, matmul, reshape, softmax_lastdim,
                     split_channels, transpose)

GAMMA_RANGE = (0.6, 0.95)


@dataclass(frozen=True)
class DecayMask:
    height: int
    width: int
    gamma: float
    matrix: np.ndarray  # (H*W, H*W), row-major token order


@lru_cache(maxsize=64)
def _decay_matrix(h: int, w: int, gamma: float) -> np.ndarray:
    rows, cols = np.divmod(np.arange(h * w), w)
    dist = np.abs(rows[:, None] - rows[None, :]) + np.abs(cols[:, None] - cols[None, :])
    m = np.power(gamma, dist.astype(np.float64)).astype(np.float32)
    m.setflags(write=False)
    return m


def manhattan_decay_mask(h: int, w: int, gamma: float) -> DecayMask:
    """D[p, q] = gamma ** (|row_p - row_q| + |col_p - col_q|)."""
    if h < 1 or w < 1:
        raise ValueError(f"grid must be at least 1x1, got {h}x{w}")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"decay rate must lie in (0, 1), got {gamma}")
    return DecayMask(h, w, float(gamma), _decay_matrix(h, w, float(gamma)))


def gamma_schedule(n: int) -> list[float]:
    """Evenly spaced decay rates, one per branch."""
    return [float(g) for g in np.linspace(*GAMMA_RANGE, n)]


class RetBlock(Module):
    def __init__(self, channels: int, heads: int, gamma: float, rng: Optional[np.random.Generator] = None):
        if channels % heads:
            raise ShapeError(f"{channels} channels cannot be split over {heads} heads")
        self.channels = channels
        self.heads = heads
        self.gamma = gamma
        self.q = Conv2d(channels, channels, 1, rng=rng)
        self.k = Conv2d(channels, channels, 1, rng=rng)
        self.v = Conv2d(channels, channels, 1, rng=rng)
        self.o = Conv2d(channels, channels, 1, rng=rng)
        self.relpos = DepthwiseConv(channels, 3, rng=rng)

    def attention(self, x: Tensor, value: Optional[Tensor] = None) -> Tensor:
        n, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"RetBlock built for {self.channels} channels, got input {x.shape}")
        hd, d, L = self.heads, c // self.heads, h * w
        value = self.v(x) if value is None else value
        q = transpose(reshape(self.q(x), (n, hd, d, L)), (0, 1, 3, 2))
        k = reshape(self.k(x), (n, hd, d, L))
        v = transpose(reshape(value, (n, hd, d, L)), (0, 1, 3, 2))
        scores = matmul(q, k) * np.asarray(1.0 / np.sqrt(d), dtype=x.dtype)
        decay = manhattan_decay_mask(h, w, self.gamma).matrix.astype(x.dtype, copy=False)
        attn = softmax_lastdim(scores) * decay
        out = transpose(matmul(attn, v), (0, 1, 3, 2))
        return self.o(reshape(out, (n, c, h, w)))

    def relpos_forward(self, x: Tensor, value: Optional[Tensor] = None) -> Tensor:
        return self.relpos(self.v(x) if value is None else value)

    def forward(self, x: Tensor) -> Tensor:
        value = self.v(x)
        return self.attention(x, value) + self.relpos_forward(x, value)


def retblock_forward(x: Tensor, block: RetBlock) -> Tensor:
    return block.attention(x)


def relpos_forward(x: Tensor, block: RetBlock) -> Tensor:
    return block.relpos_forward(x)


class PMESA(Module):
    """C2f wrapper: 1x1 -> split -> averaged retention branches -> concat -> 1x1."""

    def __init__(self, c_in: int, c_out: int, n: int, heads: int = 2,
                 gammas: Optional[Sequence[float]] = None, rng: Optional[np.random.Generator] = None):
        if n < 1:
            raise ValueError("PMESA needs at least one retention branch")
        gammas = gamma_schedule(n) if gammas is None else list(gammas)
        if len(gammas) != n or len(set(gammas)) != n:
            raise ValueError(f"need {n} distinct decay rates, got {gammas}")
        self.c = c_out // 2
        self.n = n
        self.cv1 = ConvAct(c_in, 2 * self.c, 1, rng=rng)
        self.blocks = [RetBlock(self.c, heads, g, rng=rng) for g in gammas]
        self.cv2 = ConvAct(2 * self.c, c_out, 1, rng=rng)

    def core(self, x: Tensor) -> Tensor:
        total = None
        for block in self.blocks:
            value = block.v(x)
            branch = block.attention(x, value) + block.relpos_forward(x, value)
            total = branch if total is None else total + branch
        return total / np.asarray(self.n, dtype=x.dtype)

    def forward(self, x: Tensor) -> Tensor:
        a, b = split_channels(self.cv1(x), [self.c, self.c])
        return self.cv2(concat_channels([a, self.core(b)]))


def pmesa_forward(x: Tensor, block: PMESA) -> Tensor:
    return block(x)

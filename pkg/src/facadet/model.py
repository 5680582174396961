"""Backbone + neck + head assembly with ablation switches.

Layout (widths for base width W0)::

    stem      conv3x3/2                 W0        stride 2
    stage 1   conv3x3/2 + block         2*W0      stride 4
    stage 2   conv3x3/2 + block         4*W0      stride 8   -> P3
    stage 3   conv3x3/2 + block         8*W0      stride 16  -> P4
    stage 4   conv3x3/2 + block         16*W0     stride 32  -> P5

A stage block is PMESA when ``use_pmesa`` else C2f. The neck is the usual
top-down/bottom-up path; with ``use_fbsm`` every fusion C2f is followed by
an FBSM block. The head is TDATH or the plain decoupled head.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .fbsm import FBSM
from .layers import C2f, ConvAct, Module
from .pmesa import PMESA
from .tdath import TDATH, HeadOutputs, PlainHead
from .tensor import ShapeError, Tensor, backward, concat_channels, use_tape


class ConfigError(ValueError):
    """An invalid model or training configuration."""


@dataclass
class ModelConfig:
    num_classes: int = 7
    width: int = 16
    depths: tuple[int, int, int, int] = (1, 1, 1, 1)
    use_fbsm: bool = True
    use_tdath: bool = True
    use_pmesa: bool = True
    pmesa_n: tuple[int, int, int, int] = (3, 6, 6, 3)
    heads: int = 2
    fbsm_expansion: int = 2
    input_size: int = 128
    seed: int = 0

    @property
    def widths(self) -> tuple[int, ...]:
        w = self.width
        return (w, 2 * w, 4 * w, 8 * w, 16 * w)

    def validate(self) -> "ModelConfig":
        problems = []
        if self.num_classes < 1:
            problems.append(f"num_classes must be >= 1 (got {self.num_classes})")
        if self.width < 1 or self.width % 4:
            problems.append(f"width {self.width} must be a positive multiple of 4 (FBSM channel quarters)")
        if self.use_pmesa and (self.width % self.heads):
            problems.append(f"width {self.width} must be divisible by heads={self.heads} (PMESA)")
        if len(self.depths) != 4 or any(d < 1 for d in self.depths):
            problems.append(f"depths must be four positive counts (got {self.depths})")
        if len(self.pmesa_n) != 4 or any(n < 1 for n in self.pmesa_n):
            problems.append(f"pmesa_n must be four positive counts (got {self.pmesa_n})")
        if self.input_size < 32 or self.input_size % 32:
            problems.append(f"input_size {self.input_size} must be a positive multiple of 32")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["pmesa_n"] = list(self.pmesa_n)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        for key in ("depths", "pmesa_n"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


ABLATIONS = {
    "Baseline": (False, False, False),
    "M1": (True, False, False),
    "M2": (False, True, False),
    "M3": (False, False, True),
    "M4": (True, True, False),
    "M5": (True, False, True),
    "M6": (False, True, True),
    "M7": (True, True, True),
}


def ablation_config(name: str, base: Optional[ModelConfig] = None) -> ModelConfig:
    fb, td, pm = ABLATIONS[name]
    d = (base or ModelConfig()).to_json()
    d.update(use_fbsm=fb, use_tdath=td, use_pmesa=pm)
    return ModelConfig.from_json(d)


class Fusion(Module):
    """Neck fusion: C2f, optionally followed by FBSM."""

    def __init__(self, c_in: int, c_out: int, use_fbsm: bool, expansion: int, rng):
        self.c2f = C2f(c_in, c_out, 1, shortcut=False, rng=rng)
        self.fbsm = FBSM(c_out, expansion, rng=rng) if use_fbsm else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.c2f(x)
        return self.fbsm(y) if self.fbsm is not None else y


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w = cfg.widths
        self.stem = ConvAct(3, w[0], 3, 2, rng=rng)
        self.down = []
        self.blocks = []
        for i in range(4):
            self.down.append(ConvAct(w[i], w[i + 1], 3, 2, rng=rng))
            if cfg.use_pmesa:
                self.blocks.append(PMESA(w[i + 1], w[i + 1], cfg.pmesa_n[i], cfg.heads, rng=rng))
            else:
                self.blocks.append(C2f(w[i + 1], w[i + 1], cfg.depths[i], shortcut=True, rng=rng))
        p3, p4, p5 = w[2], w[3], w[4]
        fb, e = cfg.use_fbsm, cfg.fbsm_expansion
        self.td4 = Fusion(p5 + p4, p4, fb, e, rng)
        self.td3 = Fusion(p4 + p3, p3, fb, e, rng)
        self.bu3 = ConvAct(p3, p3, 3, 2, rng=rng)
        self.bu4_fuse = Fusion(p3 + p4, p4, fb, e, rng)
        self.bu4 = ConvAct(p4, p4, 3, 2, rng=rng)
        self.bu5_fuse = Fusion(p4 + p5, p5, fb, e, rng)
        head_cls = TDATH if cfg.use_tdath else PlainHead
        self.head = head_cls((p3, p4, p5), cfg.num_classes, (8, 16, 32), rng=rng)

    # Models compare structurally through their state; keep repr short.
    def __repr__(self) -> str:
        return f"Model({self.cfg})"

    def backbone(self, x: Tensor, upto: int = 4) -> list[Tensor]:
        """Outputs of stages 1..``upto``."""
        x = self.stem(x)
        outs = []
        for i in range(upto):
            x = self.blocks[i](self.down[i](x))
            outs.append(x)
        return outs

    def neck(self, p3: Tensor, p4: Tensor, p5: Tensor) -> list[Tensor]:
        n4 = self.td4(concat_channels([F.upsample_nearest2x(p5), p4]))
        o3 = self.td3(concat_channels([F.upsample_nearest2x(n4), p3]))
        o4 = self.bu4_fuse(concat_channels([self.bu3(o3), n4]))
        o5 = self.bu5_fuse(concat_channels([self.bu4(o4), p5]))
        return [o3, o4, o5]

    def forward(self, images: Tensor) -> HeadOutputs:
        n, c, h, w = images.shape
        if c != 3 or h % 32 or w % 32:
            raise ShapeError(f"images must be (N, 3, H, W) with H, W multiples of 32, got {images.shape}")
        _, p3, p4, p5 = self.backbone(images)
        return self.head(self.neck(p3, p4, p5))

    def receptive_layers(self, upto: int = 4) -> Optional[list[tuple[int, int, int]]]:
        """(kernel, stride, padding) along the longest conv path, or None if a
        stage attends globally."""
        layers = [(3, 2, 1)]
        for i in range(upto):
            layers.append((3, 2, 1))
            block = self.blocks[i]
            if isinstance(block, PMESA):
                return None
            layers.extend((k, s, (k - 1) // 2) for k, s in block.receptive_layers())
        return layers


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def model_forward(model: Model, images: Tensor) -> HeadOutputs:
    return model(images)


# ---------------------------------------------------------------------------
# Effective receptive field
# ---------------------------------------------------------------------------

def receptive_box(layers: Sequence[tuple[int, int, int]], cell: tuple[int, int]) -> tuple[int, int, int, int]:
    """Input rows/cols (inclusive) that can influence output ``cell`` = (row, col)."""
    r0 = r1 = cell[0]
    c0 = c1 = cell[1]
    for k, s, p in reversed(layers):
        r0, r1 = r0 * s - p, r1 * s - p + k - 1
        c0, c1 = c0 * s - p, c1 * s - p + k - 1
    return r0, r1, c0, c1


def erf_map(model: Model, input_size: int, trials: int = 4, stage: int = 4, seed: int = 0) -> np.ndarray:
    """Mean |d(center-cell output of backbone stage)/d(input)|, max-normalised.

    Returns an (input_size, input_size) map summed over input channels.
    """
    if trials < 1:
        raise ValueError("erf_map needs at least one trial")
    rng = np.random.default_rng(seed)
    acc = np.zeros((input_size, input_size), np.float64)
    for _ in range(trials):
        x = Tensor(rng.standard_normal((1, 3, input_size, input_size)).astype(np.float32), requires_grad=True)
        with use_tape():
            feat = model.backbone(x, upto=stage)[-1]
            h, w = feat.shape[2:]
            backward(feat[:, :, h // 2, w // 2].sum())
        acc += np.abs(x.grad).sum(axis=(0, 1))
        model.zero_grad()
    acc /= trials
    peak = acc.max()
    return acc / peak if peak > 0 else acc


def center_receptive_box(model: Model, input_size: int, stage: int = 4) -> Optional[tuple[int, int, int, int]]:
    layers = model.receptive_layers(stage)
    if layers is None:
        return None
    out = input_size // (2 ** (stage + 1))
    return receptive_box(layers, (out // 2, out // 2))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"FDCK"
CKPT_VERSION = 1


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    """Binary checkpoint: magic, version, JSON manifest, little-endian float32 payload."""
    entries, offset, blobs = [], 0, []
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    manifest = {"format": "facadet-checkpoint", "version": CKPT_VERSION, "config": model.cfg.to_json(),
                "tensors": entries, "extra": extra or {}}
    header = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(header)) + header)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    manifest = json.loads(raw[12:12 + hlen])
    payload = np.frombuffer(raw, dtype="<f4", offset=12 + hlen)
    state = {}
    for e in manifest["tensors"]:
        state[e["name"]] = payload[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float32)
    return manifest, state


def load_checkpoint(path) -> Model:
    manifest, state = read_checkpoint(path)
    model = Model(ModelConfig.from_json(manifest["config"]))
    model.load_state_dict(state)
    return model

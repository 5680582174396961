"""Label assignment, detection loss and the SGD loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .layers import Parameter
from .model import ConfigError, Model
from .structures import Sample, check_box
from .tdath import HeadOutputs
from .tensor import (Tensor, as_tensor, atan, backward, bce_with_logits, concat, maximum, minimum,
                     no_grad, reshape, use_tape)

EPS = 1e-9
MIN_LTRB = 1e-3  # stride units


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.937
    weight_decay: float = 0.0005
    batch_size: int = 16
    epochs: int = 500
    tal_alpha: float = 1.0
    tal_beta: float = 6.0
    tal_topk: int = 10
    box_weight: float = 5.0
    max_grad_norm: Optional[float] = None  # desk-scale stabiliser; off by default
    seed: int = 0

    def validate(self) -> "TrainConfig":
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be positive (got {self.lr})")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1) (got {self.momentum})")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0 (got {self.weight_decay})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1 (got {self.epochs})")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            problems.append(f"max_grad_norm must be positive (got {self.max_grad_norm})")
        if self.tal_topk < 1:
            problems.append(f"tal_topk must be >= 1 (got {self.tal_topk})")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# Boxes
# ---------------------------------------------------------------------------

def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (M, 4) and (N, 4) box arrays."""
    a = np.asarray(a, np.float64).reshape(-1, 4)
    b = np.asarray(b, np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def ciou_loss(pred, target) -> Tensor:
    """Complete-IoU loss per box pair.

    ``pred`` is a Tensor (or array) of shape (..., 4); ``target`` holds the
    matching ground-truth boxes. Returns a tensor of shape (...,)::

        1 - IoU + rho^2 / c^2 + alpha * v
    """
    pred = as_tensor(pred, np.float64) if not isinstance(pred, Tensor) else pred
    tgt = np.asarray(target, dtype=pred.dtype)
    for box in np.asarray(pred.data).reshape(-1, 4):
        check_box(box)
    for box in tgt.reshape(-1, 4):
        check_box(box)
    px1, py1, px2, py2 = (pred[..., i] for i in range(4))
    gx1, gy1, gx2, gy2 = (tgt[..., i] for i in range(4))
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1

    iw = maximum(minimum(px2, gx2) - maximum(px1, gx1), 0.0)
    ih = maximum(minimum(py2, gy2) - maximum(py1, gy1), 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / (union + EPS)

    cw = maximum(px2, gx2) - minimum(px1, gx1)
    ch = maximum(py2, gy2) - minimum(py1, gy1)
    c2 = cw * cw + ch * ch + EPS
    dx = (px1 + px2 - gx1 - gx2) * 0.5
    dy = (py1 + py2 - gy1 - gy2) * 0.5
    rho2 = dx * dx + dy * dy

    dv = atan(as_tensor(gw / gh, pred.dtype)) - atan(pw / ph)
    v = dv * dv * (4.0 / math.pi ** 2)
    alpha = v / (v - iou + (1.0 + EPS))
    return 1.0 - iou + rho2 / c2 + alpha * v


def decode_boxes(points: np.ndarray, strides: np.ndarray, ltrb: Tensor) -> Tensor:
    """(N, A, 4) ltrb distances in stride units -> (N, A, 4) pixel boxes."""
    s = strides[:, None].astype(ltrb.dtype)
    pts = points.astype(ltrb.dtype)
    lt = ltrb[..., 0:2] * s
    rb = ltrb[..., 2:4] * s
    return concat([pts - lt, pts + rb], axis=-1)


# ---------------------------------------------------------------------------
# Task-aligned assignment
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    """Per-cell targets for one image.

    ``gt_index`` is -1 for background cells. ``target_scores`` is (A, K) with
    the normalised alignment placed at the assigned gt's class.
    """

    gt_index: np.ndarray
    align: np.ndarray
    target_scores: np.ndarray
    target_boxes: np.ndarray

    @property
    def foreground(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def num_foreground(self) -> int:
        return int(self.foreground.sum())


def centers_inside(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(G, A) mask of cell centres strictly inside each box."""
    x, y = points[None, :, 0], points[None, :, 1]
    b = boxes[:, None, :]
    return (x > b[..., 0]) & (x < b[..., 2]) & (y > b[..., 1]) & (y < b[..., 3])


def tal_assign(points: np.ndarray, scores: np.ndarray, pred_boxes: np.ndarray, gt_boxes: np.ndarray,
               gt_classes: np.ndarray, alpha: float = 1.0, beta: float = 6.0, topk: int = 10) -> Assignment:
    """Assign cells to ground truths by alignment = score^alpha * IoU^beta.

    ``points`` (A, 2) cell centres, ``scores`` (A, K) class probabilities,
    ``pred_boxes`` (A, 4) decoded predictions. Each gt takes its ``topk``
    best-aligned cells among those whose centre lies inside it (ties go to
    the lower cell index); a cell claimed twice keeps the better alignment
    (ties go to the lower gt index).
    """
    a_count, k_count = scores.shape
    gt_boxes = np.asarray(gt_boxes, np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, np.int64).reshape(-1)
    gt_index = np.full(a_count, -1, np.int64)
    cell_align = np.zeros(a_count, np.float64)
    target_scores = np.zeros((a_count, k_count), np.float64)
    target_boxes = np.zeros((a_count, 4), np.float64)
    if len(gt_boxes) == 0:
        return Assignment(gt_index, cell_align, target_scores, target_boxes)

    inside = centers_inside(points, gt_boxes)
    ious = box_iou_matrix(gt_boxes, pred_boxes)
    align = np.power(scores[:, gt_classes].T.astype(np.float64), alpha) * np.power(ious, beta)

    for g in range(len(gt_boxes)):
        cand = np.flatnonzero(inside[g])
        if cand.size == 0:
            continue
        order = np.argsort(-align[g, cand], kind="stable")
        for a in cand[order[:topk]]:
            # strict '>' keeps the earlier gt on ties
            if gt_index[a] < 0 or align[g, a] > align[gt_index[a], a]:
                gt_index[a] = g

    fg = np.flatnonzero(gt_index >= 0)
    cell_align[fg] = align[gt_index[fg], fg]
    norm = np.zeros(a_count, np.float64)
    for g in np.unique(gt_index[fg]):
        cells = fg[gt_index[fg] == g]
        peak_align = cell_align[cells].max()
        peak_iou = ious[g, cells].max()
        norm[cells] = cell_align[cells] * peak_iou / (peak_align + EPS)
    target_scores[fg, gt_classes[gt_index[fg]]] = norm[fg]
    target_boxes[fg] = gt_boxes[gt_index[fg]]
    return Assignment(gt_index, cell_align, target_scores, target_boxes)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

@dataclass
class LossParts:
    total: Tensor
    cls: Tensor
    box: Tensor

    def values(self) -> dict[str, float]:
        return {"loss": self.total.item(), "cls": self.cls.item(), "box": self.box.item()}


def assign_batch(outputs: HeadOutputs, targets: Sequence[tuple[np.ndarray, np.ndarray]],
                 cfg: Optional[TrainConfig] = None) -> list[Assignment]:
    """Run ``tal_assign`` on every image from the (detached) predictions."""
    cfg = cfg or TrainConfig()
    points, strides = outputs.anchors()
    with no_grad():
        logits, ltrb = outputs.flatten()
        boxes = decode_boxes(points, strides, ltrb).data.astype(np.float64)
    probs = 1.0 / (1.0 + np.exp(-logits.data.astype(np.float64)))
    return [tal_assign(points, probs[b], boxes[b], gt_boxes, gt_classes,
                       cfg.tal_alpha, cfg.tal_beta, cfg.tal_topk)
            for b, (gt_boxes, gt_classes) in enumerate(targets)]


def detection_loss(outputs: HeadOutputs, targets: Sequence[tuple[np.ndarray, np.ndarray]],
                   cfg: Optional[TrainConfig] = None,
                   assignments: Optional[Sequence[Assignment]] = None) -> LossParts:
    """BCE on class logits plus ``box_weight`` times the mean CIoU of foreground cells.

    ``targets`` holds one (boxes (G, 4), classes (G,)) pair per image. Passing
    ``assignments`` freezes the label assignment (used for gradient checks).
    """
    cfg = cfg or TrainConfig()
    if assignments is None:
        assignments = assign_batch(outputs, targets, cfg)
    logits, ltrb = outputs.flatten()
    dtype = logits.dtype
    tscores = np.stack([a.target_scores for a in assignments]).astype(dtype)
    cls_part = bce_with_logits(logits, tscores).sum() / max(float(tscores.sum()), 1.0)

    img_idx, cell_idx = np.nonzero(np.stack([a.foreground for a in assignments]))
    if img_idx.size:
        points, strides = outputs.anchors()
        # floor keeps collapsed predictions representable in float32
        fg_ltrb = maximum(ltrb[img_idx, cell_idx], MIN_LTRB)
        boxes = decode_boxes(points[cell_idx], strides[cell_idx], reshape(fg_ltrb, (1, -1, 4)))
        gt = np.stack([assignments[i].target_boxes[a] for i, a in zip(img_idx, cell_idx)])
        box_part = ciou_loss(reshape(boxes, (-1, 4)), gt).mean()
    else:
        box_part = Tensor(np.zeros((), dtype))
    return LossParts(cls_part + box_part * cfg.box_weight, cls_part, box_part)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: list,
             cfg: TrainConfig, decay: Optional[Sequence[bool]] = None) -> list[np.ndarray]:
    """One momentum-SGD update, in place on ``params`` and ``state``.

    v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
    ``state`` is a list of velocity arrays (filled on first use). ``decay``
    selects which params receive weight decay (default: all).
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state:
        state.extend(np.zeros_like(p) for p in params)
    decay = [True] * len(params) if decay is None else list(decay)
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p) if g is None else g
        if p.shape != np.shape(g):
            raise ValueError(f"param {i}: grad shape {np.shape(g)} != {p.shape}")
        v = state[i]
        if decay[i] and cfg.weight_decay:
            v[...] = cfg.momentum * v + g + cfg.weight_decay * p
        else:
            v[...] = cfg.momentum * v + g
        p -= cfg.lr * v
    return list(params)


class SGD:
    def __init__(self, params: Sequence[Parameter], cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state: list[np.ndarray] = []

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.cfg.max_grad_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
            if norm > self.cfg.max_grad_norm:
                scale = np.float32(self.cfg.max_grad_norm / norm)
                grads = [g * scale for g in grads]
        sgd_step([p.data for p in self.params], grads, self.state, self.cfg,
                 [getattr(p, "decay", True) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cls: float
    box: float
    seconds: float
    ap50: Optional[float] = None


@dataclass
class RunLog:
    model_config: dict
    train_config: dict
    records: list[EpochRecord] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    def to_json(self) -> dict:
        return {"model_config": self.model_config, "train_config": self.train_config,
                "epochs": [asdict(r) for r in self.records]}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def collate(samples: Sequence[Sample]) -> tuple[Tensor, list[tuple[np.ndarray, np.ndarray]]]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    return Tensor(images), [(s.boxes, s.classes) for s in samples]


def train_epoch(model: Model, dataset: Sequence[Sample], cfg: TrainConfig, epoch: int = 0,
                optimizer: Optional[SGD] = None, log: Optional[RunLog] = None) -> EpochRecord:
    """One pass over ``dataset`` in a shuffled order fixed by (cfg.seed, epoch)."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    optimizer = optimizer or SGD(model.parameters(), cfg)
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
    start = time.perf_counter()
    totals = np.zeros(3)
    for i in range(0, len(order), cfg.batch_size):
        batch = [dataset[j] for j in order[i:i + cfg.batch_size]]
        images, targets = collate(batch)
        optimizer.zero_grad()
        with use_tape():
            parts = detection_loss(model(images), targets, cfg)
            backward(parts.total)
        optimizer.step()
        v = parts.values()
        totals += np.array([v["loss"], v["cls"], v["box"]]) * len(batch)
    totals /= len(dataset)
    record = EpochRecord(epoch, float(totals[0]), float(totals[1]), float(totals[2]),
                         time.perf_counter() - start)
    if log is not None:
        log.records.append(record)
    return record


def fit(model: Model, dataset: Sequence[Sample], cfg: TrainConfig, log: Optional[RunLog] = None,
        eval_every: int = 0, eval_fn=None, callback=None) -> RunLog:
    """Train for ``cfg.epochs`` epochs. ``eval_fn(model) -> AP50`` runs every ``eval_every`` epochs."""
    cfg.validate()
    log = log or RunLog(model.cfg.to_json(), cfg.to_json())
    opt = SGD(model.parameters(), cfg)
    for epoch in range(cfg.epochs):
        rec = train_epoch(model, dataset, cfg, epoch, opt, log)
        if eval_fn is not None and eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            rec.ap50 = float(eval_fn(model))
        if callback is not None:
            callback(rec)
    return log


def predict(model: Model, samples: Sequence[Sample], batch_size: int = 8, conf_threshold: float = 0.001,
            nms_iou: float = 0.65) -> list:
    """Decoded, NMS-filtered detections for ``samples`` (no gradient tape)."""
    from .metrics import nms
    from .tdath import decode_ltrb

    dets = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            images, _ = collate(chunk)
            dets.extend(decode_ltrb(model(images), conf_threshold, [s.image_id for s in chunk]))
    return nms(dets, nms_iou)


def samples_ap50(model: Model, samples: Sequence[Sample], batch_size: int = 8) -> float:
    from .metrics import ap50
    from .structures import Annotation

    gts = [Annotation(s.image_id, int(c), tuple(float(v) for v in b))
           for s in samples for b, c in zip(s.boxes, s.classes)]
    return ap50(predict(model, samples, batch_size), gts, model.cfg.num_classes)


def desk_train_config(**overrides) -> TrainConfig:
    """Overrides that make the tiny preset trainable on one CPU in minutes.

    Higher learning rate and small batches so 8 scenes give several updates
    per epoch; gradient clipping because nothing in the backbone normalises
    activations.
    """
    base = dict(lr=0.005, batch_size=2, epochs=60, max_grad_norm=10.0)
    base.update(overrides)
    return TrainConfig(**base)

"""Box records shared by the data, training and evaluation code.

Boxes are ``(x_min, y_min, x_max, y_max)`` in pixels, with pixel ``(r, c)``
covering ``[c, c+1] x [r, r+1]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

CLASS_NAMES = ("Door", "EM_Win", "PR_Win", "Bal", "ACU", "Bib", "Gla_Wal")
NUM_CLASSES = len(CLASS_NAMES)

Box = tuple[float, float, float, float]


class DegenerateBoxError(ValueError):
    """A box with non-positive width or height."""


def check_box(box: Sequence[float]) -> Box:
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x1 < x2 and y1 < y2):
        raise DegenerateBoxError(f"degenerate box {tuple(box)}")
    return x1, y1, x2, y2


def box_area(box: Sequence[float]) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


@dataclass(frozen=True)
class Annotation:
    image_id: int
    class_id: int
    box: Box

    @property
    def area(self) -> float:
        return box_area(self.box)

    def to_json(self) -> dict:
        d = asdict(self)
        d["box"] = list(self.box)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Annotation":
        return cls(int(d["image_id"]), int(d["class_id"]), tuple(float(v) for v in d["box"]))


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    box: Box
    score: float

    @property
    def area(self) -> float:
        return box_area(self.box)

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "class_id": self.class_id,
                "box": [float(v) for v in self.box], "score": float(self.score)}

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        return cls(int(d["image_id"]), int(d["class_id"]), tuple(float(v) for v in d["box"]),
                   float(d["score"]))


@dataclass
class Sample:
    """One training image: (3, H, W) float32 in [0, 1] plus its boxes and class ids."""

    image_id: int
    image: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray

    @classmethod
    def from_annotations(cls, image_id: int, image: np.ndarray, annotations: Sequence[Annotation]) -> "Sample":
        boxes = np.array([a.box for a in annotations], dtype=np.float64).reshape(-1, 4)
        classes = np.array([a.class_id for a in annotations], dtype=np.int64)
        return cls(image_id, image, boxes, classes)

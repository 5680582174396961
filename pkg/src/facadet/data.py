"""Synthetic façade scenes, view warps, dataset files and statistics.

A scene is a frontal wall split into a floors x bays grid. Ground-floor
bays hold doors or windows, upper bays hold embedded or protruding
windows, optionally with an air-conditioner box beside and a balcony
below. A scene may also carry one striped billboard over two bays and one
glass curtain wall over a 2x2 block of upper bays. Every element is drawn
from a binary mask and annotated with the tight box of that mask.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .structures import CLASS_NAMES, Annotation, Sample

DOOR, EM_WIN, PR_WIN, BAL, ACU, BIB, GLA_WAL = range(7)

# Reference instance counts per class (train, val, test) that the generator is tuned to.
REFERENCE_COUNTS = {
    "Door": (2446, 348, 659),
    "EM_Win": (20521, 3033, 3155),
    "PR_Win": (2617, 352, 545),
    "Bal": (748, 124, 189),
    "ACU": (3617, 482, 659),
    "Bib": (875, 139, 160),
    "Gla_Wal": (684, 123, 75),
}
_REF_TOTAL = sum(sum(v) for v in REFERENCE_COUNTS.values())
TARGET_PROPORTIONS = {k: sum(v) / _REF_TOTAL for k, v in REFERENCE_COUNTS.items()}

SPLITS = ("train", "val", "test")
AZIMUTHS = (0, 60, 120, 180, 240, 300)
MAX_TILT = 30.0
MAX_YAW = 35.0


class SceneError(ValueError):
    """The requested scene cannot be laid out."""


@dataclass(frozen=True)
class SceneSpec:
    """Layout and appearance parameters of the façade generator.

    ``floors`` and ``bays`` are inclusive ranges sampled per scene. The
    probabilities are per scene (billboard, glass wall), per ground bay
    (door), or per window (protruding, air conditioner, balcony).
    """

    image_size: int = 512
    floors: tuple[int, int] = (3, 5)
    bays: tuple[int, int] = (3, 5)
    p_door: float = 0.35
    p_protruding: float = 0.117
    p_acu: float = 0.165
    p_balcony: float = 0.053
    p_billboard: float = 0.47
    p_glass: float = 0.35
    enabled: tuple[int, ...] = tuple(range(len(CLASS_NAMES)))
    min_element_px: int = 4
    seed: int = 0

    def validate(self) -> "SceneSpec":
        if min(self.floors) < 2 or min(self.bays) < 2:
            raise SceneError(f"grid must be at least 2x2, got floors={self.floors} bays={self.bays}")
        if self.floors[0] > self.floors[1] or self.bays[0] > self.bays[1]:
            raise SceneError("floor/bay ranges must be (low, high)")
        cell = self.image_size * 0.9 / max(self.floors[1], self.bays[1])
        if cell < 3 * self.min_element_px:
            raise SceneError(f"{self.image_size}px image too small for a "
                             f"{self.floors[1]}x{self.bays[1]} grid")
        for name in ("p_door", "p_protruding", "p_acu", "p_balcony", "p_billboard", "p_glass"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise SceneError(f"{name}={p} is not a probability")
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["floors"], d["bays"], d["enabled"] = list(self.floors), list(self.bays), list(self.enabled)
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "SceneSpec":
        d = dict(d)
        for key in ("floors", "bays", "enabled"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def tiny_scene_spec(**overrides) -> SceneSpec:
    """Desk-scale preset: 128 px images with a fixed 3x3 grid."""
    base = SceneSpec(image_size=128, floors=(3, 3), bays=(3, 3), min_element_px=10)
    return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Masks and drawing
# ---------------------------------------------------------------------------

def mask_to_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Tight box (x1, y1, x2, y2) around the set cells of a 2-D mask."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask has no set cells")
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)


def _rect_mask(shape: tuple[int, int], x1: int, y1: int, x2: int, y2: int) -> np.ndarray:
    m = np.zeros(shape, bool)
    m[max(y1, 0):max(y2, 0), max(x1, 0):max(x2, 0)] = True
    return m


def _arch_mask(shape: tuple[int, int], x1: int, y1: int, x2: int, y2: int) -> np.ndarray:
    """Rectangle with a semicircular top, used for doors."""
    m = _rect_mask(shape, x1, y1, x2, y2)
    r = (x2 - x1) / 2.0
    cx = (x1 + x2) / 2.0
    top = int(y1 + r)
    yy, xx = np.mgrid[y1:top, x1:x2]
    m[y1:top, x1:x2] = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - (y1 + r)) ** 2 <= r * r
    return m


def _shade(color, factor: float) -> np.ndarray:
    return np.clip(np.asarray(color, np.float64) * factor, 0, 255).astype(np.uint8)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) uint8
    annotations: list[Annotation]
    grid: tuple[int, int]
    seed: int


class _Canvas:
    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.wall = rng.integers(140, 230, 3)
        sky = np.array([170, 200, 230]) + rng.integers(-20, 20, 3)
        self.img = np.empty((size, size, 3), np.uint8)
        self.img[...] = sky.clip(0, 255)
        self.annotations: list[Annotation] = []

    def fill(self, mask: np.ndarray, color) -> None:
        self.img[mask] = np.asarray(color, np.uint8)

    def emit(self, image_id: int, class_id: int, mask: np.ndarray, enabled: Sequence[int]) -> None:
        if class_id in enabled:
            self.annotations.append(Annotation(image_id, class_id, mask_to_bbox(mask)))


def generate_scene(spec: SceneSpec, seed: int, image_id: int = 0) -> Scene:
    """Render one façade; a pure function of (spec, seed)."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, seed])
    S = spec.image_size
    floors = int(rng.integers(spec.floors[0], spec.floors[1] + 1))
    bays = int(rng.integers(spec.bays[0], spec.bays[1] + 1))
    cv = _Canvas(S, rng)
    shape = (S, S)
    en = spec.enabled

    sky = int(round(S * 0.06))
    ground = int(round(S * 0.03))
    margin = int(round(S * 0.04))
    fx1, fx2, fy1, fy2 = margin, S - margin, sky, S - ground
    cv.fill(_rect_mask(shape, fx1, fy1, fx2, fy2), cv.wall)
    cv.fill(_rect_mask(shape, 0, fy2, S, S), (90, 90, 90))
    cw = (fx2 - fx1) / bays
    ch = (fy2 - fy1) / floors

    def cell(r: int, c: int) -> tuple[float, float, float, float]:
        return fx1 + c * cw, fy1 + r * ch, fx1 + (c + 1) * cw, fy1 + (r + 1) * ch

    taken = np.zeros((floors, bays), bool)
    mpx = spec.min_element_px

    # glass curtain wall over a 2x2 block of upper floors
    if GLA_WAL in en and floors >= 3 and bays >= 2 and rng.random() < spec.p_glass:
        r0 = int(rng.integers(0, floors - 2))
        c0 = int(rng.integers(0, bays - 1))
        x1, y1, _, _ = cell(r0, c0)
        _, _, x2, y2 = cell(r0 + 1, c0 + 1)
        inset = max(1, int(0.06 * cw))
        m = _rect_mask(shape, int(x1) + inset, int(y1) + inset, int(x2) - inset, int(y2) - inset)
        cv.fill(m, (70, 130, 160) + rng.integers(0, 30, 3))
        step = max(3, int(cw / 4))
        mullion = m & (((np.arange(S)[None, :] - int(x1)) % step == 0) | ((np.arange(S)[:, None] - int(y1)) % step == 0))
        cv.fill(mullion, (200, 210, 215))
        cv.emit(image_id, GLA_WAL, m, en)
        taken[r0:r0 + 2, c0:c0 + 2] = True

    # billboard across two adjacent free bays of an upper floor
    if BIB in en and rng.random() < spec.p_billboard:
        slots = [(r, c) for r in range(floors - 1) for c in range(bays - 1)
                 if not taken[r, c] and not taken[r, c + 1]]
        if slots:
            r, c = slots[int(rng.integers(len(slots)))]
            x1, y1, _, _ = cell(r, c)
            _, _, x2, y2 = cell(r, c + 1)
            h = max(mpx, int(0.55 * ch))
            top = int(y1 + (ch - h) / 2)
            m = _rect_mask(shape, int(x1 + 0.08 * cw), top, int(x2 - 0.08 * cw), top + h)
            colors = rng.integers(0, 256, (2, 3))
            stripe = max(2, h // 5)
            band = ((np.arange(S)[:, None] - top) // stripe) % 2 == 0
            cv.fill(m & band, colors[0])
            cv.fill(m & ~band, colors[1])
            cv.emit(image_id, BIB, m, en)
            taken[r, c:c + 2] = True

    glass_tint = np.array([40, 70, 110])
    for r in range(floors):
        for c in range(bays):
            if taken[r, c]:
                continue
            x1, y1, x2, y2 = cell(r, c)
            jitter = rng.uniform(-0.04, 0.04, 2)
            if r == floors - 1 and DOOR in en and rng.random() < spec.p_door:
                w = max(mpx, int(0.4 * cw))
                h = max(mpx, int(0.75 * ch))
                dx = int((x1 + x2) / 2 - w / 2 + jitter[0] * cw)
                m = _arch_mask(shape, dx, int(y2) - h, dx + w, int(y2))
                cv.fill(m, _shade((120, 75, 40), rng.uniform(0.8, 1.2)))
                cv.emit(image_id, DOOR, m, en)
                continue
            if EM_WIN not in en and PR_WIN not in en:
                continue
            w = max(mpx, int(0.52 * cw))
            h = max(mpx, int(0.52 * ch))
            wx = int((x1 + x2) / 2 - w / 2 + jitter[0] * cw)
            wy = int((y1 + y2) / 2 - h / 2 - 0.05 * ch + jitter[1] * ch)
            protruding = rng.random() < spec.p_protruding
            if PR_WIN not in en:
                protruding = False
            elif EM_WIN not in en:
                protruding = True
            pane = _rect_mask(shape, wx, wy, wx + w, wy + h)
            if protruding:
                # frame + cast shadow to the lower right
                sh = max(2, w // 8)
                shadow = _rect_mask(shape, wx + sh, wy + sh, wx + w + sh, wy + h + sh)
                cv.fill(shadow, _shade(cv.wall, 0.45))
                frame = _rect_mask(shape, wx - 1, wy - 1, wx + w + 1, wy + h + 1)
                cv.fill(frame, (235, 235, 235))
                cv.fill(pane, glass_tint + rng.integers(0, 40, 3))
                cv.emit(image_id, PR_WIN, frame | shadow, en)
            else:
                cv.fill(pane, glass_tint + rng.integers(0, 40, 3))
                bar = pane & (np.arange(S)[None, :] == wx + w // 2)
                cv.fill(bar, _shade(cv.wall, 0.8))
                cv.emit(image_id, EM_WIN, pane, en)

            if r < floors - 1 and BAL in en and rng.random() < spec.p_balcony:
                bh = max(mpx, int(0.16 * ch))
                by = wy + h + 1
                m = _rect_mask(shape, wx - int(0.1 * w), by, wx + w + int(0.1 * w), by + bh)
                cv.fill(m, (110, 110, 115))
                rail = m & ((np.arange(S)[None, :] - wx) % 3 == 0)
                cv.fill(rail, (60, 60, 60))
                cv.emit(image_id, BAL, m, en)

            if ACU in en and rng.random() < spec.p_acu:
                aw = max(mpx, int(0.2 * cw))
                ah = max(mpx, int(0.14 * ch))
                side = int(rng.integers(2))
                ax = wx + w + 2 if side else wx - aw - 2
                ax = int(np.clip(ax, x1, x2 - aw))
                ay = int(wy + h / 2 - ah / 2)
                m = _rect_mask(shape, ax, ay, ax + aw, ay + ah)
                cv.fill(m, (225, 225, 220))
                grille = m & ((np.arange(S)[:, None] - ay) % 3 == 1)
                cv.fill(grille, (150, 150, 150))
                cv.emit(image_id, ACU, m, en)

    return Scene(cv.img, cv.annotations, (floors, bays), seed)


# ---------------------------------------------------------------------------
# View warp
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewPose:
    """Camera pose of one view: azimuth step and downward tilt in degrees.

    ``height_m`` is carried as metadata only.
    """

    azimuth: int = 0
    tilt: float = 0.0
    height_m: float = 10.0

    def __post_init__(self):
        if self.azimuth not in AZIMUTHS:
            raise ValueError(f"azimuth must be one of {AZIMUTHS}, got {self.azimuth}")
        if not 0.0 <= self.tilt <= MAX_TILT:
            raise ValueError(f"tilt must lie in [0, {MAX_TILT}], got {self.tilt}")

    @property
    def is_identity(self) -> bool:
        return self.azimuth in (0, 180) and self.tilt == 0.0

    def yaw(self) -> float:
        """Horizontal plane rotation (degrees) standing in for the azimuth."""
        return MAX_YAW * math.sin(math.radians(self.azimuth))


def view_homography(pose: ViewPose, width: int, height: int) -> np.ndarray:
    """3x3 matrix mapping source pixel coords to warped coords.

    The façade plane is rotated about its top-centre point (yaw about the
    vertical axis, then tilt about the horizontal one) and re-projected by a
    pinhole camera at distance 4*max(W, H).
    """
    d = 4.0 * max(width, height)
    a, t = math.radians(pose.yaw()), math.radians(pose.tilt)
    ry = np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
    rx = np.array([[1, 0, 0], [0, math.cos(t), -math.sin(t)], [0, math.sin(t), math.cos(t)]])
    r = rx @ ry
    plane = np.array([[r[0, 0], r[0, 1], 0.0], [r[1, 0], r[1, 1], 0.0], [r[2, 0], r[2, 1], d]])
    k = np.array([[d, 0, width / 2.0], [0, d, 0], [0, 0, 1]])
    shift = np.array([[1, 0, -width / 2.0], [0, 1, 0], [0, 0, 1]])
    return k @ plane @ shift


def warp_points(hmat: np.ndarray, xs, ys) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = np.asarray(xs, np.float64), np.asarray(ys, np.float64)
    w = hmat[2, 0] * xs + hmat[2, 1] * ys + hmat[2, 2]
    u = (hmat[0, 0] * xs + hmat[0, 1] * ys + hmat[0, 2]) / w
    v = (hmat[1, 0] * xs + hmat[1, 1] * ys + hmat[1, 2]) / w
    return u, v


def warp_box(hmat: np.ndarray, box: Sequence[float], width: int, height: int) -> Optional[tuple[float, ...]]:
    """Enclosure of the four warped corners, clipped to the frame; None if nothing remains."""
    x1, y1, x2, y2 = box
    u, v = warp_points(hmat, [x1, x2, x2, x1], [y1, y1, y2, y2])
    bx1, bx2 = max(float(u.min()), 0.0), min(float(u.max()), float(width))
    by1, by2 = max(float(v.min()), 0.0), min(float(v.max()), float(height))
    if bx1 >= bx2 or by1 >= by2:
        return None
    return bx1, by1, bx2, by2


def apply_view_warp(image: np.ndarray, annotations: Sequence[Annotation], pose: ViewPose,
                    fill=(170, 200, 230)) -> tuple[np.ndarray, list[Annotation]]:
    """Warp an (H, W, 3) uint8 image and its boxes into the view ``pose``."""
    if pose.is_identity:
        return image.copy(), list(annotations)
    h, w = image.shape[:2]
    hmat = view_homography(pose, w, h)
    inv = np.linalg.inv(hmat)
    rr, cc = np.mgrid[0:h, 0:w]
    sx, sy = warp_points(inv, cc + 0.5, rr + 0.5)
    coords = np.stack([sy - 0.5, sx - 0.5])
    out = np.empty_like(image)
    for ch in range(image.shape[2]):
        vals = ndimage.map_coordinates(image[..., ch].astype(np.float64), coords, order=1,
                                       mode="constant", cval=float(fill[ch]))
        out[..., ch] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    warped = []
    for a in annotations:
        box = warp_box(hmat, a.box, w, h)
        if box is not None:
            warped.append(Annotation(a.image_id, a.class_id, box))
    return out, warped


# ---------------------------------------------------------------------------
# Splits and statistics
# ---------------------------------------------------------------------------

def split_sizes(n: int) -> tuple[int, int, int]:
    train, val = (8 * n) // 10, n // 10
    return train, val, n - train - val


def split_dataset(items: Sequence, seed: int) -> tuple[list, list, list]:
    """Shuffle with ``seed`` and cut 80/10/10 (floor, floor, remainder)."""
    n = len(items)
    if n < 10:
        raise ValueError(f"need at least 10 items to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    a, b, _ = split_sizes(n)
    pick = lambda idx: [items[i] for i in idx]
    return pick(order[:a]), pick(order[a:a + b]), pick(order[a + b:])


@dataclass
class DatasetStats:
    counts: dict[str, dict[str, int]]  # class name -> split -> count

    @property
    def totals(self) -> dict[str, int]:
        return {name: sum(per.values()) for name, per in self.counts.items()}

    def split_totals(self) -> dict[str, int]:
        return {s: sum(per.get(s, 0) for per in self.counts.values()) for s in SPLITS}

    def proportions(self) -> dict[str, float]:
        tot = self.totals
        n = sum(tot.values())
        return {k: (v / n if n else 0.0) for k, v in tot.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", *SPLITS, "total", "proportion"])
        props = self.proportions()
        for name, per in self.counts.items():
            w.writerow([name, *(per.get(s, 0) for s in SPLITS), sum(per.values()), f"{props[name]:.4f}"])
        st = self.split_totals()
        w.writerow(["total", *(st[s] for s in SPLITS), sum(st.values()), "1.0000" if sum(st.values()) else "0.0000"])
        return buf.getvalue()


def dataset_stats(dataset: Mapping[str, Iterable[Annotation]]) -> DatasetStats:
    """Exact per-class counts for each split of ``{split: annotations}``."""
    counts = {name: {s: 0 for s in SPLITS} for name in CLASS_NAMES}
    for split, anns in dataset.items():
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        for a in anns:
            counts[CLASS_NAMES[a.class_id]][split] += 1
    return DatasetStats(counts)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, np.uint8, count=w * h * 3, offset=pos + 1)
    return data.reshape(h, w, 3).copy()


def random_pose(rng: np.random.Generator) -> ViewPose:
    return ViewPose(int(rng.choice(AZIMUTHS)), float(round(rng.uniform(0.0, MAX_TILT), 3)))


def generate_dataset(root, n: int, seed: int, spec: Optional[SceneSpec] = None,
                     warp: bool = True) -> DatasetStats:
    """Write ``n`` scenes under ``root`` as images/, annotations/{split}.json,
    classes.txt and stats.csv."""
    spec = (spec or SceneSpec()).validate()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(exist_ok=True)
    rng = np.random.default_rng([seed, 1])
    records = []
    for i in range(n):
        scene = generate_scene(spec, seed * 1_000_003 + i, image_id=i)
        pose = random_pose(rng) if warp else ViewPose()
        image, anns = apply_view_warp(scene.image, scene.annotations, pose)
        name = f"{i:05d}.ppm"
        write_ppm(root / "images" / name, image)
        meta = {"id": i, "file": f"images/{name}", "W": int(image.shape[1]), "H": int(image.shape[0]),
                "pose": asdict(pose)}
        records.append((meta, anns))
    parts = split_dataset(records, seed) if n >= 10 else (records, [], [])
    per_split = {}
    for split, part in zip(SPLITS, parts):
        part = sorted(part, key=lambda rec: rec[0]["id"])
        payload = {"images": [m for m, _ in part],
                   "annotations": [a.to_json() for _, anns in part for a in anns],
                   "categories": list(CLASS_NAMES)}
        (root / "annotations" / f"{split}.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        per_split[split] = [a for _, anns in part for a in anns]
    (root / "classes.txt").write_text("\n".join(CLASS_NAMES) + "\n")
    stats = dataset_stats(per_split)
    (root / "stats.csv").write_text(stats.to_csv())
    return stats


def read_annotation_file(path) -> tuple[list[dict], list[Annotation]]:
    payload = json.loads(Path(path).read_text())
    return payload["images"], [Annotation.from_json(a) for a in payload["annotations"]]


def load_split(root, split: str) -> tuple[list[dict], list[Annotation]]:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    return read_annotation_file(Path(root) / "annotations" / f"{split}.json")


def image_to_array(image: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return (np.transpose(image, (2, 0, 1)).astype(np.float32) / 255.0)


def load_samples(root, split: str) -> list[Sample]:
    images, anns = load_split(root, split)
    by_image: dict[int, list[Annotation]] = {m["id"]: [] for m in images}
    for a in anns:
        by_image[a.image_id].append(a)
    return [Sample.from_annotations(m["id"], image_to_array(read_ppm(Path(root) / m["file"])), by_image[m["id"]])
            for m in images]


def scene_samples(spec: SceneSpec, n: int, seed: int = 0) -> list[Sample]:
    """Unwarped in-memory samples, used for quick training runs."""
    out = []
    for i in range(n):
        s = generate_scene(spec, seed * 1_000_003 + i, image_id=i)
        out.append(Sample.from_annotations(i, image_to_array(s.image), s.annotations))
    return out

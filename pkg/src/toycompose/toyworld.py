"""Procedural shape scenes and the template-matching oracle used for scoring.

Images are float arrays in [-1, 1] with shape (3, H, W).  Boxes are
normalized ``(x0, y0, x1, y1)`` tuples; a pixel belongs to a box when its
center falls inside it.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .text import BACKGROUNDS, COLORS, SHAPES, TEXTURES

Box = tuple[float, float, float, float]

PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
}
INK = (1.0, 1.0, 1.0)  # texture marks
BACKGROUND_COLORS = {
    "night": (-0.9, -0.9, -0.9),
    "grass": (-0.7, -0.3, -0.7),
    "beach": (-0.2, -0.45, -0.7),
    "road": (-0.45, -0.45, -0.45),
}
BACKGROUND_NOISE = 0.04


class OcclusionError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    base_category: str
    color: str
    texture: str = "solid"
    size: float = 0.45  # default box side as a fraction of the canvas

    def __post_init__(self):
        if self.base_category not in SHAPES:
            raise ValueError(f"unknown shape {self.base_category!r}")
        if self.color not in PALETTE:
            raise ValueError(f"unknown color {self.color!r}")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")

    @property
    def appearance(self) -> tuple[str, str]:
        return (self.color, self.texture)

    def describe(self) -> str:
        return f"{self.color} {self.texture} {self.base_category}"


def all_appearances() -> list[tuple[str, str]]:
    return [(c, t) for c in COLORS for t in TEXTURES]


# --------------------------------------------------------------------------
# rasterization helpers


def box_cells(box: Box, h: int, w: int) -> np.ndarray:
    """Boolean (h, w) grid of cells whose centers fall inside the box."""
    x0, y0, x1, y1 = box
    cy = (np.arange(h) + 0.5) / h
    cx = (np.arange(w) + 0.5) / w
    rows = (cy >= y0) & (cy < y1)
    cols = (cx >= x0) & (cx < x1)
    return rows[:, None] & cols[None, :]


def _cell_bounds(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def shape_mask_in_bounds(category: str, top: int, bottom: int, left: int, right: int, h: int, w: int) -> np.ndarray:
    """Mask of ``category`` inscribed in the pixel rectangle [top, bottom) x [left, right)."""
    out = np.zeros((h, w), dtype=bool)
    bh, bw = bottom - top, right - left
    if bh <= 0 or bw <= 0:
        return out
    v = (np.arange(bh) + 0.5) / bh
    u = (np.arange(bw) + 0.5) / bw
    V, U = np.meshgrid(v, u, indexing="ij")
    if category == "square":
        m = np.ones_like(U, dtype=bool)
    elif category == "circle":
        m = (U - 0.5) ** 2 + (V - 0.5) ** 2 <= 0.25 + 1e-9
    elif category == "triangle":
        # apex row keeps at least the centre pixel(s)
        half = np.maximum(0.5 * (np.arange(bh) + 1) / bh, 0.5 / bw)
        m = np.abs(U - 0.5) <= half[:, None] + 1e-9
    elif category == "diamond":
        dv = np.abs(v - 0.5)
        half = np.maximum(0.5 - dv, 0.5 / bw)
        half[dv <= 0.5 / bh + 1e-9] = 0.5  # middle row(s) span the full width
        m = np.abs(U - 0.5) <= half[:, None] + 1e-9
    else:
        raise ValueError(f"unknown shape {category!r}")
    out[top:bottom, left:right] = m
    return out


def texture_mask(texture: str, top: int, left: int, h: int, w: int, phase: int = 0) -> np.ndarray:
    """Where texture ink goes, anchored at the shape's top-left pixel."""
    r = np.arange(h)[:, None] - top
    c = np.arange(w)[None, :] - left
    if texture == "solid":
        return np.zeros((h, w), dtype=bool)
    if texture == "striped":
        return np.broadcast_to((r + phase) % 2 == 1, (h, w)).copy()
    if texture == "dotted":
        pr, pc = divmod(phase, 2)
        return ((r + pr) % 2 == 1) & ((c + pc) % 2 == 1)
    raise ValueError(f"unknown texture {texture!r}")


def render_scene(
    specs: Sequence[tuple[ShapeSpec, Box]],
    canvas: tuple[int, int] = (16, 16),
    seed: int = 0,
    background: str = "night",
    occlusion_limit: float = 0.25,
) -> np.ndarray:
    """Draw each shape inscribed in its box over a lightly noisy background."""
    h, w = canvas
    if background not in BACKGROUND_COLORS:
        raise ValueError(f"unknown background {background!r}")
    rng = np.random.default_rng(seed)
    img = np.empty((3, h, w), dtype=np.float32)
    img[:] = np.asarray(BACKGROUND_COLORS[background], dtype=np.float32)[:, None, None]
    img += rng.uniform(-BACKGROUND_NOISE, BACKGROUND_NOISE, size=img.shape).astype(np.float32)
    cells = []
    for spec, box in specs:
        x0, y0, x1, y1 = box
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"box outside the canvas: {box}")
        cells.append(box_cells(box, h, w))
    for a, b in itertools.combinations(range(len(cells)), 2):
        inter = (cells[a] & cells[b]).sum()
        smaller = max(1, min(cells[a].sum(), cells[b].sum()))
        if inter / smaller > occlusion_limit:
            raise OcclusionError(f"boxes {a} and {b} overlap beyond the occlusion limit")
    for (spec, _), cell in zip(specs, cells):
        bounds = _cell_bounds(cell)
        if bounds is None:
            continue
        top, bottom, left, right = bounds
        m = shape_mask_in_bounds(spec.base_category, top, bottom, left, right, h, w)
        ink = texture_mask(spec.texture, top, left, h, w) & m
        img[:, m] = np.asarray(PALETTE[spec.color], dtype=np.float32)[:, None]
        img[:, ink] = np.asarray(INK, dtype=np.float32)[:, None]
    return img


# --------------------------------------------------------------------------
# datasets


def random_box(rng: np.random.Generator, size: float, jitter: float = 0.1) -> Box:
    s = float(np.clip(size + rng.uniform(-jitter, jitter), 0.3, 0.9))
    x0 = float(rng.uniform(0, 1 - s))
    y0 = float(rng.uniform(0, 1 - s))
    return (x0, y0, x0 + s, y0 + s)


@dataclass
class SubjectDataset:
    name: str
    spec: ShapeSpec
    images: np.ndarray  # (n, 3, H, W)
    boxes: list[Box]
    caption: str

    @property
    def base_category(self) -> str:
        return self.spec.base_category


def make_subject_dataset(
    spec: ShapeSpec, n: int = 4, seed: int = 0, canvas: tuple[int, int] = (16, 16), name: str | None = None
) -> SubjectDataset:
    """A few renders of one subject with jittered position, size and background."""
    if not 3 <= n <= 5:
        raise ValueError(f"subject datasets hold 3-5 images, got {n}")
    rng = np.random.default_rng(seed)
    images, boxes = [], []
    for i in range(n):
        box = random_box(rng, spec.size)
        bg = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]
        images.append(render_scene([(spec, box)], canvas, seed=int(rng.integers(2**31)), background=bg))
        boxes.append(box)
    return SubjectDataset(
        name=name or spec.describe().replace(" ", "_"),
        spec=spec,
        images=np.stack(images),
        boxes=boxes,
        caption=f"a photo of {spec.base_category}",
    )


def _describe(spec: ShapeSpec, rng, p_color: float, p_texture: float) -> str:
    words = []
    if rng.random() < p_color:
        words.append(spec.color)
    if rng.random() < p_texture:
        words.append(spec.texture)
    words.append(spec.base_category)
    return " ".join(words)


def _two_boxes(rng, size_range=(0.35, 0.55), tries: int = 100) -> tuple[Box, Box]:
    for _ in range(tries):
        a = random_box(rng, rng.uniform(*size_range), jitter=0.0)
        b = random_box(rng, rng.uniform(*size_range), jitter=0.0)
        if a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]:
            return a, b
    raise RuntimeError("could not place two disjoint boxes")


@dataclass
class SceneDataset:
    images: np.ndarray  # (N, 3, H, W)
    captions: list[str]
    layouts: list[list[tuple[ShapeSpec, Box]]]
    backgrounds: list[str]


def make_scene_dataset(
    n: int,
    seed: int = 0,
    canvas: tuple[int, int] = (16, 16),
    p_two: float = 0.4,
    p_same_shape: float = 0.3,
    p_color: float = 0.8,
    p_texture: float = 0.6,
) -> SceneDataset:
    """Random one- and two-object scenes with attribute-dropped captions."""
    rng = np.random.default_rng(seed)
    images, captions, layouts, bgs = [], [], [], []
    for _ in range(n):
        bg = BACKGROUNDS[rng.integers(len(BACKGROUNDS))]

        def rand_spec(shape=None):
            return ShapeSpec(
                shape or SHAPES[rng.integers(len(SHAPES))],
                COLORS[rng.integers(len(COLORS))],
                TEXTURES[rng.integers(len(TEXTURES))],
            )

        if rng.random() < p_two:
            s1 = rand_spec()
            s2 = rand_spec(s1.base_category if rng.random() < p_same_shape else None)
            b1, b2 = _two_boxes(rng)
            layout = [(s1, b1), (s2, b2)]
            d1, d2 = (_describe(s, rng, p_color, p_texture) for s in (s1, s2))
            if rng.random() < 0.5:
                d1, d2 = d2, d1
            if rng.random() < 0.7:
                caption = f"a photo of {d1} and {d2}"
            else:
                caption = f"a {d1} and a {d2} on the {bg}"
        else:
            s1 = rand_spec()
            layout = [(s1, random_box(rng, rng.uniform(0.35, 0.7), jitter=0.0))]
            d1 = _describe(s1, rng, p_color, p_texture)
            form = rng.random()
            if form < 0.6:
                caption = f"a photo of {d1}"
            elif form < 0.8:
                caption = f"a {d1} on the {bg}"
            else:
                caption = f"a photo of {d1} on the {bg}"
        images.append(render_scene(layout, canvas, seed=int(rng.integers(2**31)), background=bg))
        captions.append(caption)
        layouts.append(layout)
        bgs.append(bg)
    return SceneDataset(np.stack(images), captions, layouts, bgs)


# --------------------------------------------------------------------------
# oracle


@dataclass
class Component:
    mask: np.ndarray
    color: str
    texture: str
    category: str
    shape_score: float
    box: Box

    def iou(self, box: Box) -> float:
        h, w = self.mask.shape
        return grid_iou(self.box, box, h, w)

    @property
    def appearance(self) -> tuple[str, str]:
        return (self.color, self.texture)


@dataclass
class Detection:
    present: bool
    iou: float
    confused_with: Optional[tuple[str, str]] = None
    box: Optional[Box] = None
    category_found: Optional[str] = None


def box_iou(a: Box, b: Box) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def grid_iou(a: Box, b: Box, h: int, w: int) -> float:
    """IoU of two boxes after cell-center rasterization on an (h, w) grid."""
    ca, cb = box_cells(a, h, w), box_cells(b, h, w)
    union = (ca | cb).sum()
    return float((ca & cb).sum() / union) if union else 0.0


def _pixel_labels(image: np.ndarray) -> tuple[np.ndarray, list[str]]:
    names = list(PALETTE) + ["ink"] + list(BACKGROUND_COLORS)
    ref = np.asarray(list(PALETTE.values()) + [INK] + list(BACKGROUND_COLORS.values()))
    px = np.asarray(image, dtype=np.float64).reshape(3, -1).T
    d = ((px[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    return d.argmin(1).reshape(image.shape[1:]), names


def _classify_texture(ink: np.ndarray, mask: np.ndarray, top: int, left: int) -> str:
    h, w = mask.shape
    area = mask.sum()
    if area == 0 or ink[mask].mean() < 0.12:
        return "solid"
    best, best_score = "solid", (~ink[mask]).mean()
    for texture, phases in (("striped", 2), ("dotted", 4)):
        for ph in range(phases):
            tmpl = texture_mask(texture, top, left, h, w, phase=ph)
            score = (tmpl[mask] == ink[mask]).mean()
            if score > best_score:
                best, best_score = texture, score
    return best


def find_components(image: np.ndarray, min_pixels: int | None = None) -> list[Component]:
    """Segment non-background blobs per palette color and classify each one."""
    _, h, w = image.shape
    if min_pixels is None:
        min_pixels = max(4, (h * w) // 40)
    labels, names = _pixel_labels(image)
    ink_id = names.index("ink")
    ink = labels == ink_id
    out = []
    structure = np.ones((3, 3), dtype=bool)
    for ci, color in enumerate(PALETTE):
        colored = labels == ci
        if colored.sum() < min_pixels:
            continue
        comp_labels, k = ndimage.label(colored | ink, structure=structure)
        for j in range(1, k + 1):
            mask = comp_labels == j
            if (mask & colored).sum() < min_pixels:
                continue
            top, bottom, left, right = _cell_bounds(mask)
            scores = {}
            for cat in SHAPES:
                tmpl = shape_mask_in_bounds(cat, top, bottom, left, right, h, w)
                union = (tmpl | mask).sum()
                scores[cat] = (tmpl & mask).sum() / union if union else 0.0
            category = max(SHAPES, key=lambda c: scores[c])
            texture = _classify_texture(ink, mask, top, left)
            box = (left / w, top / h, right / w, bottom / h)
            out.append(Component(mask, color, texture, category, float(scores[category]), box))
    return out


def _match_key(comp: Component, spec: ShapeSpec, box: Box | None):
    exact = comp.appearance == spec.appearance
    iou = comp.iou(box) if box is not None else 0.0
    return (exact, iou, int(comp.mask.sum()))


def _candidates(components, spec: ShapeSpec, box: Box | None):
    out = [c for c in components if c.category == spec.base_category]
    if box is not None:
        out = [c for c in out if c.iou(box) > 0.0]
    return out


def _detection(comp: Component | None, spec: ShapeSpec, box: Box | None) -> Detection:
    if comp is None:
        return Detection(False, 0.0)
    iou = comp.iou(box) if box is not None else 0.0
    confused = None if comp.appearance == spec.appearance else comp.appearance
    return Detection(True, iou, confused, comp.box, comp.category)


def oracle_detect(image: np.ndarray, box: Box | None, spec: ShapeSpec) -> Detection:
    """Look for ``spec`` in the image.

    A detection needs a blob classified as the spec's category (overlapping
    the box when one is given).  An exact appearance match is preferred;
    otherwise the best same-category blob is reported with its appearance in
    ``confused_with``.
    """
    cands = _candidates(find_components(image), spec, box)
    best = max(cands, key=lambda c: _match_key(c, spec, box), default=None)
    return _detection(best, spec, box)


def detect_subjects(image: np.ndarray, subjects: Sequence[tuple[ShapeSpec, Box | None]]) -> list[Detection]:
    """Joint detection: each blob explains at most one subject.

    Assignments are enumerated exhaustively and ranked by number of present
    subjects, then exact appearance matches, then total IoU.
    """
    comps = find_components(image)
    options = []
    for spec, box in subjects:
        allowed = {id(c) for c in _candidates(comps, spec, box)}
        options.append([None] + [i for i, c in enumerate(comps) if id(c) in allowed])
    best, best_key = None, None
    for assign in itertools.product(*options):
        used = [a for a in assign if a is not None]
        if len(used) != len(set(used)):
            continue
        present = len(used)
        exact = sum(
            1 for a, (spec, _) in zip(assign, subjects) if a is not None and comps[a].appearance == spec.appearance
        )
        iou = sum(
            comps[a].iou(box) for a, (_, box) in zip(assign, subjects) if a is not None and box is not None
        )
        key = (present, exact, iou)
        if best_key is None or key > best_key:
            best, best_key = assign, key
    return [
        _detection(comps[a] if a is not None else None, spec, box) for a, (spec, box) in zip(best, subjects)
    ]


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    subjects: list[str]
    presence_rate: dict[str, float]
    iou: dict[str, list[float]]
    confusion_rate: float
    all_present_rate: float
    n_images: int
    per_subject_confusion: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def median_iou(self, subject: str) -> float:
        vals = self.iou.get(subject, [])
        return float(np.median(vals)) if vals else 0.0

    @property
    def mean_presence(self) -> float:
        return float(np.mean(list(self.presence_rate.values()))) if self.presence_rate else 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate_run(
    images: Sequence[np.ndarray],
    subjects: Sequence[tuple[str, ShapeSpec, Box | None]],
    metadata: dict | None = None,
) -> EvalReport:
    """Score a batch of images that should each contain every listed subject.

    Presence is the fraction of (image, subject) pairs detected; confusion is
    the fraction of present detections whose appearance differs from the
    subject's; IoU values are collected for present detections with a box.
    """
    if len(images) < 1:
        raise ValueError("need at least one image")
    names = [n for n, _, _ in subjects]
    present = {n: 0 for n in names}
    confused = {n: 0 for n in names}
    ious: dict[str, list[float]] = {n: [] for n in names}
    all_present = 0
    for img in images:
        dets = detect_subjects(np.asarray(img), [(spec, box) for _, spec, box in subjects])
        for (name, _, box), det in zip(subjects, dets):
            if det.present:
                present[name] += 1
                confused[name] += det.confused_with is not None
                if box is not None:
                    ious[name].append(det.iou)
        all_present += all(d.present for d in dets)
    n = len(images)
    total_present = sum(present.values())
    return EvalReport(
        subjects=names,
        presence_rate={k: v / n for k, v in present.items()},
        iou=ious,
        confusion_rate=(sum(confused.values()) / total_present) if total_present else 0.0,
        all_present_rate=all_present / n,
        n_images=n,
        per_subject_confusion={k: (confused[k] / present[k]) if present[k] else 0.0 for k in names},
        metadata=dict(metadata or {}),
    )

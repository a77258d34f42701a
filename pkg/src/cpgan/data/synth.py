"""Procedural scenes of coloured shapes with templated captions.

Stands in for a captioned photo corpus plus a pretrained detector: every
scene is drawn from a seed, rendered by hard rasterisation, described by one
of a few caption templates, and annotated with exact boxes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "purple", "cyan")

# RGB in [-1, 1]; pairwise max-channel distance >= 1.6, distance to the
# mid-grey background >= 1.0
PALETTE = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "purple": (0.6, -1.0, 0.6),
    "cyan": (-1.0, 1.0, 1.0),
}

POSITIONS = ("left", "right", "top", "bottom", "center")
GLUE = ("a", "and", "on", "the", "of", "to", "next", "above", "below", "image")
VOCAB: tuple = GLUE + POSITIONS + COLORS + SHAPES
WORD_ID = {w: i for i, w in enumerate(VOCAB)}

SUPPORTED_RESOLUTIONS = (8, 16, 32, 64, 128, 256)
N_TEMPLATES = 3
MAX_CAPTION_LEN = 12

MIN_CENTER_DIST = 0.25
# gap between bounding circles; > sqrt(2)/32 keeps shapes of a 32px render
# from touching even diagonally
SHAPE_GAP = 0.05
MAX_RETRIES = 1000
SHRINK_AFTER = 200


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: float
    cy: float
    r: float

    @property
    def label(self) -> str:
        return f"{self.color}_{self.shape}"

    @property
    def bound_radius(self) -> float:
        return self.r * math.sqrt(2.0) if self.shape == "square" else self.r

    def extent(self) -> tuple:
        """Tight continuous bounding box (x0, y0, x1, y1) in unit coordinates."""
        if self.shape == "triangle":
            half_w = self.r * math.sqrt(3.0) / 2.0
            return (self.cx - half_w, self.cy - self.r, self.cx + half_w, self.cy + self.r / 2.0)
        return (self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)

    def area(self) -> float:
        if self.shape == "circle":
            return math.pi * self.r**2
        if self.shape == "square":
            return 4.0 * self.r**2
        return 3.0 * math.sqrt(3.0) / 4.0 * self.r**2

    def box(self, resolution: int) -> tuple:
        x0, y0, x1, y1 = self.extent()
        q = lambda v, f: int(min(max(f(v * resolution), 0), resolution))
        return (q(x0, math.floor), q(y0, math.floor), q(x1, math.ceil), q(y1, math.ceil))


@dataclass(frozen=True)
class Scene:
    objects: tuple
    canvas: int = 32

    def object_boxes(self, resolution: Optional[int] = None) -> list:
        res = resolution or self.canvas
        return [(o.color, o.shape, o.box(res)) for o in self.objects]


@dataclass(frozen=True)
class Detection:
    box: tuple
    label: str
    confidence: float

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate detection box {self.box}")
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside (0, 1]")

    @property
    def color(self) -> str:
        return self.label.split("_")[0]

    @property
    def shape(self) -> str:
        return self.label.split("_")[1]


def _valid_placement(objs: Sequence[SceneObject], strict: bool) -> bool:
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            a, b = objs[i], objs[j]
            dist = math.hypot(a.cx - b.cx, a.cy - b.cy)
            if dist < MIN_CENTER_DIST:
                return False
            if strict and dist < a.bound_radius + b.bound_radius + SHAPE_GAP:
                return False
    return True


def _place(rng: np.random.Generator, kinds: Sequence[tuple], r_max: float = 0.3) -> list:
    objs = []
    for shape, color in kinds:
        r = float(rng.uniform(0.1, r_max))
        br = r * math.sqrt(2.0) if shape == "square" else r
        cx, cy = (float(v) for v in rng.uniform(br, 1.0 - br, size=2))
        objs.append(SceneObject(shape, color, cx, cy, r))
    return objs


def sample_scene(seed: int, canvas: int = 32) -> Scene:
    """Deterministic scene of 1-3 non-touching shapes fully inside the canvas.

    Shapes and colours are drawn once, so rejection of crowded placements
    (which would otherwise reject large squares more often) leaves their
    marginals uniform; only sizes and positions are redrawn, with the radius
    ceiling shrinking towards 0.1 over the first SHRINK_AFTER attempts so a
    crowded draw (three large squares) still finds room.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    kinds = [(SHAPES[rng.integers(len(SHAPES))], COLORS[rng.integers(len(COLORS))]) for _ in range(n)]
    for attempt in range(MAX_RETRIES):
        objs = _place(rng, kinds, 0.1 + 0.2 * max(0.0, 1.0 - attempt / SHRINK_AFTER))
        if _valid_placement(objs, strict=True):
            return Scene(tuple(objs), canvas)
    logger.warning("seed %d: no non-touching placement after %d tries; relaxing spacing", seed, MAX_RETRIES)
    while True:
        objs = _place(rng, kinds)
        if _valid_placement(objs, strict=False):
            return Scene(tuple(objs), canvas)


def shape_mask(obj: SceneObject, resolution: int) -> np.ndarray:
    """Boolean H x W coverage of ``obj``, sampled at pixel centres."""
    c = (np.arange(resolution) + 0.5) / resolution
    px = c[None, :]
    py = c[:, None]
    if obj.shape == "circle":
        return (px - obj.cx) ** 2 + (py - obj.cy) ** 2 <= obj.r**2
    if obj.shape == "square":
        return (np.abs(px - obj.cx) <= obj.r) & (np.abs(py - obj.cy) <= obj.r)
    # upright equilateral triangle with circumradius r
    return (py <= obj.cy + obj.r / 2.0) & (np.abs(px - obj.cx) * math.sqrt(3.0) <= py - (obj.cy - obj.r))


def render_scene(scene: Scene, resolution: int) -> np.ndarray:
    """Rasterise to a 3 x H x H float array in [-1, 1]; background is 0."""
    if resolution not in SUPPORTED_RESOLUTIONS:
        raise ValueError(f"unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS}")
    img = np.zeros((3, resolution, resolution))
    for obj in scene.objects:
        m = shape_mask(obj, resolution)
        for ch, v in enumerate(PALETTE[obj.color]):
            img[ch][m] = v
    return img


def _position_word(obj: SceneObject) -> str:
    dx, dy = obj.cx - 0.5, obj.cy - 0.5
    if max(abs(dx), abs(dy)) < 0.15:
        return "center"
    if abs(dx) >= abs(dy):
        return "left" if dx < 0 else "right"
    return "top" if dy < 0 else "bottom"


def _relation(a: SceneObject, b: SceneObject) -> list:
    dx, dy = a.cx - b.cx, a.cy - b.cy
    if abs(dx) >= abs(dy):
        return ["left", "of"] if dx < 0 else ["next", "to"]
    return ["above"] if dy < 0 else ["below"]


def caption_words(scene: Scene, template: int) -> list:
    objs = scene.objects
    if template == 0:
        words = []
        for i, o in enumerate(objs):
            if i:
                words.append("and")
            words += ["a", o.color, o.shape]
        return words
    if template == 1:
        if len(objs) == 1:
            o = objs[0]
            return ["a", o.color, o.shape, "on", "the", _position_word(o)]
        a, b = objs[0], objs[1]
        words = ["a", a.color, a.shape] + (_relation(a, b) if len(objs) == 2 else ["next", "to"]) + ["a", b.color, b.shape]
        if len(objs) == 3:
            c = objs[2]
            words += ["and", "a", c.color, c.shape]
        return words
    if template == 2:
        words = ["image", "of"]
        for i, o in enumerate(objs):
            if i:
                words.append("and")
            words += [o.color, o.shape]
        return words
    raise ValueError(f"unknown caption template {template}")


def generate_caption(scene: Scene, seed: int) -> list:
    """Token ids of a templated caption; the template is picked by ``seed``."""
    rng = np.random.default_rng([seed, 1])
    template = int(rng.integers(N_TEMPLATES))
    words = caption_words(scene, template)
    assert 1 <= len(words) <= MAX_CAPTION_LEN
    return [WORD_ID[w] for w in words]


def decode(tokens: Sequence[int]) -> str:
    return " ".join(VOCAB[t] for t in tokens)


def gt_detect(scene: Scene, resolution: int, top_r: int = 6) -> list:
    """Exact boxes ranked by normalised (unit-canvas) area, largest first."""
    if top_r < 1:
        raise ValueError("top_r must be >= 1")
    dets = [Detection(o.box(resolution), o.label, min(o.area(), 1.0)) for o in scene.objects]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    return [dets[i] for i in order[:top_r]]


def _iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _objects_of(scene) -> list:
    if isinstance(scene, Scene):
        return scene.object_boxes()
    return [(d.color, d.shape, d.box) for d in scene]


def salience_weights(word_id: int, scene, regions: Sequence[Sequence[float]]) -> np.ndarray:
    """Word-to-region attention stand-in.

    ``scene`` is a :class:`Scene` (boxes at its canvas size) or the list of
    ground-truth detections, in the same pixel frame as ``regions``. Colour and
    shape words weight each region by its IoU with the boxes of the objects the
    word names; any other word, or a word whose objects no region touches,
    gets uniform weights.
    """
    n = len(regions)
    if n == 0:
        raise ValueError("salience_weights needs at least one region")
    uniform = np.full(n, 1.0 / n)
    word = VOCAB[word_id]
    if word not in COLORS and word not in SHAPES:
        return uniform
    targets = [box for color, shape, box in _objects_of(scene) if word in (color, shape)]
    scores = np.array([sum(_iou(reg, box) for box in targets) for reg in regions])
    total = scores.sum()
    if total <= 0:
        return uniform
    return scores / total


@dataclass
class Sample:
    index: int
    image: np.ndarray  # uint8, H x W x 3
    tokens: list
    detections: list = field(default_factory=list)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] floats (C x H x W) to 8-bit H x W x C."""
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def to_float(img8: np.ndarray) -> np.ndarray:
    """8-bit H x W x C to C x H x W floats in [-1, 1]."""
    return img8.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def make_sample(index: int, base_seed: int, resolution: int = 32, top_r: int = 6) -> tuple:
    seed = base_seed ^ index
    scene = sample_scene(seed, canvas=resolution)
    img = to_uint8(render_scene(scene, resolution))
    tokens = generate_caption(scene, seed)
    return Sample(index, img, tokens, gt_detect(scene, resolution, top_r)), scene


def generate_dataset(count: int, base_seed: int, resolution: int = 32, top_r: int = 6) -> list:
    return [make_sample(i, base_seed, resolution, top_r)[0] for i in range(count)]

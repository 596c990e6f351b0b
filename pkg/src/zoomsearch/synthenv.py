"""Procedural zoom-required visual-search scenes.

A scene is a vector description of a large virtual canvas holding a handful of
small glyphs. Exactly one glyph sits inside a red-bordered box; the question
asks about that glyph. Images are rasterized on demand from the vector source,
so zooming into a window genuinely reveals detail.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Iterable, Literal

import numpy as np

from .geometry import BBox, compose, intersection_area

Difficulty = Literal["easy", "medium", "hard"]
DIFFICULTIES: tuple[str, ...] = ("easy", "medium", "hard")

CANVAS_SIZE = 4096
BASE_RESOLUTION = 448
LEGIBLE_PX = 12.0
# border colour of a boxed cell is distinguishable once the box spans this many pixels
CUE_PX = 8.0
MIN_BOX_AREA = 1e-6
MIN_RESOLUTION = 16
MAX_GLYPH_FRACTION = 0.05

DIGITS = tuple(str(d) for d in range(10))
COLORS = ("green", "blue", "yellow", "purple")
SHAPES = ("circle", "square", "triangle")
ANSWER_VOCAB: tuple[str, ...] = DIGITS + COLORS + SHAPES
ASK_KINDS = ("digit", "color", "shape")

TARGET_BORDER = "red"
DISTRACTOR_BORDERS = ("orange", "magenta", "cyan")

PALETTE = {
    "green": (40, 170, 60),
    "blue": (40, 80, 210),
    "yellow": (230, 200, 30),
    "purple": (130, 50, 170),
    "red": (220, 30, 30),
    "orange": (240, 140, 20),
    "magenta": (220, 40, 180),
    "cyan": (30, 200, 210),
    "white": (250, 250, 250),
    "panel": (225, 225, 225),
}

# glyph side in virtual pixels: hard glyphs stay below 12 px on every
# single-level anchor window and reach it after two 0.5 zooms
GLYPH_SIZE = {"easy": (112.0, 160.0), "medium": (60.0, 100.0), "hard": (28.0, 36.0)}
DISTRACTORS = {"easy": 2, "medium": 3, "hard": 3}
CLUTTER = 8
MIN_CANDIDATE_SEPARATION = 0.3


def _anchor_grid(scale: float, starts: Iterable[float]) -> list[BBox]:
    starts = list(starts)
    # rounded so anchors survive the 6-decimal wire format unchanged
    return [BBox(x, y, round(x + scale, 6), round(y + scale, 6)) for y in starts for x in starts]


# Prescribed zoom windows relative to the current view: 3x3 grid at scale 0.5
# plus 2x2 grid at scale 0.34 centred on the quadrants.
ZOOM_ANCHORS: tuple[BBox, ...] = tuple(
    _anchor_grid(0.5, (0.0, 0.25, 0.5)) + _anchor_grid(0.34, (0.08, 0.58))
)

# 3x5 bitmap font, rows top to bottom
_FONT = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
}
_FONT_BITS = {k: np.array([[c == "1" for c in row] for row in v]) for k, v in _FONT.items()}


class DegenerateBox(ValueError):
    """Render window or output resolution too small to rasterize."""


@dataclass(frozen=True)
class Cell:
    """One glyph on the canvas.

    ``region`` is the whole cell (glyph plus padding and border) and
    ``glyph_box`` the glyph footprint, both relative to the canvas.
    ``border`` is None for unboxed clutter glyphs.
    """

    region: BBox
    glyph_box: BBox
    digit: str
    color: str
    shape: str
    border: str | None
    is_target: bool = False

    @property
    def glyph(self) -> str:
        return f"{self.color} {self.shape} {self.digit}"

    @property
    def is_candidate(self) -> bool:
        return self.border is not None

    def attribute(self, kind: str) -> str:
        return {"digit": self.digit, "color": self.color, "shape": self.shape}[kind]


@dataclass(frozen=True)
class Scene:
    seed: int
    difficulty: str
    canvas_size: int
    cells: tuple[Cell, ...]
    target_cell: int
    distractor_count: int
    ask: str
    background: tuple[float, ...] = field(repr=False)

    @property
    def target(self) -> Cell:
        return self.cells[self.target_cell]

    @functools.cached_property
    def candidate_indices(self) -> tuple[int, ...]:
        return tuple(i for i, c in enumerate(self.cells) if c.is_candidate)

    @functools.cached_property
    def candidate_boxes(self) -> tuple[np.ndarray, np.ndarray]:
        """(glyph boxes, regions) of the candidate cells as (n, 4) arrays."""
        cells = [self.cells[i] for i in self.candidate_indices]
        glyphs = np.array([c.glyph_box.as_tuple() for c in cells])
        regions = np.array([c.region.as_tuple() for c in cells])
        glyphs.flags.writeable = False
        regions.flags.writeable = False
        return glyphs, regions


@dataclass(frozen=True)
class QAPair:
    question: str
    answer: str
    target_region: BBox


@dataclass(frozen=True)
class Crop:
    """Provenance of a cropped image: source image index (1-based) and box in it."""

    source_index: int
    bbox_in_source: BBox


@dataclass(frozen=True)
class Image:
    """Rendered view of a scene window.

    ``provenance`` is None for the original image. Pixels are rasterized on
    first access; everything else is pure geometry.
    """

    width: int
    height: int
    window: BBox
    scene: Scene = field(repr=False, compare=False)
    provenance: Crop | None = None

    @functools.cached_property
    def pixels(self) -> bytes:
        return rasterize(self.scene, self.window, self.width, self.height).tobytes()

    @property
    def is_original(self) -> bool:
        return self.provenance is None


def _rng_for(seed: int, difficulty: str, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, DIFFICULTIES.index(difficulty), attempt])


def _place_centers(
    rng: np.random.Generator, n: int, lo: float, hi: float, min_sep: float, avoid: list[np.ndarray]
) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    sep = min_sep
    tries = 0
    while len(out) < n:
        p = rng.uniform(lo, hi, size=2)
        if all(np.hypot(*(p - q)) >= sep for q in out + avoid):
            out.append(p)
        tries += 1
        if tries % 200 == 0:
            sep *= 0.9
    return out


def _make_cell(
    rng: np.random.Generator, center: np.ndarray, glyph_px: float, canvas: int, border: str | None
) -> Cell:
    g = glyph_px / canvas
    cx, cy = float(center[0]), float(center[1])
    glyph = BBox(cx - g / 2, cy - g / 2, cx + g / 2, cy + g / 2)
    pad = 0.3 * g
    region = BBox(glyph.x1 - pad, glyph.y1 - pad, glyph.x2 + pad, glyph.y2 + pad)
    return Cell(
        region=region,
        glyph_box=glyph,
        digit=DIGITS[int(rng.integers(len(DIGITS)))],
        color=COLORS[int(rng.integers(len(COLORS)))],
        shape=SHAPES[int(rng.integers(len(SHAPES)))],
        border=border,
    )


def _build(seed: int, difficulty: str, attempt: int) -> Scene:
    rng = _rng_for(seed, difficulty, attempt)
    lo, hi = GLYPH_SIZE[difficulty]
    n_dis = DISTRACTORS[difficulty]
    margin = 0.06
    centers = _place_centers(rng, n_dis + 1, margin, 1 - margin, MIN_CANDIDATE_SEPARATION, [])
    clutter_centers = _place_centers(rng, CLUTTER, margin, 1 - margin, 0.08, centers)
    target_slot = int(rng.integers(n_dis + 1))
    borders = list(rng.choice(DISTRACTOR_BORDERS, size=n_dis))
    cells = []
    for i, c in enumerate(centers):
        border = TARGET_BORDER if i == target_slot else str(borders.pop())
        cell = _make_cell(rng, c, float(rng.uniform(lo, hi)), CANVAS_SIZE, border)
        if i == target_slot:
            cell = Cell(cell.region, cell.glyph_box, cell.digit, cell.color, cell.shape, border, True)
        cells.append(cell)
    for c in clutter_centers:
        cells.append(_make_cell(rng, c, float(rng.uniform(lo, hi)), CANVAS_SIZE, None))
    order = rng.permutation(len(cells))
    cells = [cells[i] for i in order]
    target = next(i for i, c in enumerate(cells) if c.is_target)
    background = tuple(float(v) for v in rng.uniform(0.0, 1.0, size=8))
    return Scene(
        seed=seed,
        difficulty=difficulty,
        canvas_size=CANVAS_SIZE,
        cells=tuple(cells),
        target_cell=target,
        distractor_count=n_dis,
        ask=ASK_KINDS[int(rng.integers(len(ASK_KINDS)))],
        background=background,
    )


REQUIRED_DEPTH = {"easy": 0, "medium": 1, "hard": 2}


@functools.lru_cache(maxsize=4096)
def generate_scene(seed: int, difficulty: str) -> Scene:
    """Deterministically build a scene whose target needs the difficulty's zoom depth."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    attempt = 0
    while True:
        scene = _build(seed, difficulty, attempt)
        if zoom_depth_needed(scene) == REQUIRED_DEPTH[difficulty]:
            return scene
        attempt += 1


def make_qa(scene: Scene) -> QAPair:
    cue = f"the symbol inside the {TARGET_BORDER}-bordered box"
    question = {
        "digit": f"Which digit is shown in {cue}?",
        "color": f"What color is {cue}?",
        "shape": f"What shape is {cue}?",
    }[scene.ask]
    target = scene.target
    return QAPair(question=question, answer=target.attribute(scene.ask), target_region=target.region)


def cue_matches(scene: Scene) -> list[int]:
    """Indices of cells satisfying the question's locating cue."""
    return [i for i, c in enumerate(scene.cells) if c.border == TARGET_BORDER]


def normalize_answer(text: str) -> str:
    return " ".join(text.split()).casefold()


def verify_answer(scene: Scene, qa: QAPair, answer_text: str) -> bool:
    return normalize_answer(answer_text) == normalize_answer(qa.answer)


def glyph_footprint_px(cell: Cell, window: BBox, out_w: int, out_h: int) -> tuple[float, float]:
    """Output-pixel width and height of the part of ``cell``'s glyph inside ``window``."""
    g = cell.glyph_box
    w = min(g.x2, window.x2) - max(g.x1, window.x1)
    h = min(g.y2, window.y2) - max(g.y1, window.y1)
    if w <= 0.0 or h <= 0.0:
        return (0.0, 0.0)
    return (w / window.width * out_w, h / window.height * out_h)


def is_legible(cell: Cell, window: BBox, out_w: int, out_h: int | None = None,
               threshold: float = LEGIBLE_PX) -> bool:
    pw, ph = glyph_footprint_px(cell, window, out_w, out_w if out_h is None else out_h)
    return pw >= threshold and ph >= threshold


def is_cue_visible(cell: Cell, window: BBox, out_w: int, out_h: int | None = None,
                   threshold: float = CUE_PX) -> bool:
    """Whether a boxed cell's border colour can be told apart in this view."""
    if cell.border is None:
        return False
    r = cell.region
    w = min(r.x2, window.x2) - max(r.x1, window.x1)
    h = min(r.y2, window.y2) - max(r.y1, window.y1)
    if w <= 0.0 or h <= 0.0:
        return False
    out_h = out_w if out_h is None else out_h
    return w / window.width * out_w >= threshold and h / window.height * out_h >= threshold


def legibility_oracle(scene: Scene, bbox: BBox, out_w: int, out_h: int | None = None,
                      threshold: float = LEGIBLE_PX) -> bool:
    """Whether the target glyph is decodable in ``bbox`` rendered ``out_w`` wide."""
    return is_legible(scene.target, bbox, out_w, out_h, threshold)


def zoom_depth_needed(scene: Scene, out_w: int = BASE_RESOLUTION, max_depth: int = 3) -> int | None:
    """Fewest nested anchor zooms after which the target becomes legible."""
    frontier = [BBox.full()]
    target = scene.target.glyph_box
    for depth in range(max_depth + 1):
        if any(legibility_oracle(scene, w, out_w) for w in frontier):
            return depth
        frontier = [
            child
            for w in frontier
            for a in ZOOM_ANCHORS
            if intersection_area(child := compose(w, a), target) > 0.0
        ]
    return None


def rasterize(scene: Scene, window: BBox, out_w: int, out_h: int) -> np.ndarray:
    """Point-sample the canvas window at pixel centres; returns (out_h, out_w, 3) uint8."""
    xs = window.x1 + (np.arange(out_w) + 0.5) / out_w * (window.x2 - window.x1)
    ys = window.y1 + (np.arange(out_h) + 0.5) / out_h * (window.y2 - window.y1)
    b = scene.background
    gx, gy = np.meshgrid(xs, ys)
    wave = np.sin(2 * np.pi * ((1 + 3 * b[0]) * gx + (1 + 3 * b[1]) * gy) + 6.28 * b[2])
    base = np.array([150 + 60 * b[3], 150 + 60 * b[4], 150 + 60 * b[5]])
    img = base[None, None, :] + (20 + 20 * b[6]) * wave[..., None]
    img = np.clip(img, 0, 255).astype(np.uint8)

    for cell in scene.cells:
        r = cell.region
        c0, c1 = np.searchsorted(xs, r.x1, "left"), np.searchsorted(xs, r.x2, "left")
        r0, r1 = np.searchsorted(ys, r.y1, "left"), np.searchsorted(ys, r.y2, "left")
        if c0 >= c1 or r0 >= r1:
            continue
        sx, sy = xs[c0:c1], ys[r0:r1]
        patch = img[r0:r1, c0:c1]
        g = cell.glyph_box
        if cell.border is not None:
            t = 0.4 * (g.x1 - r.x1)
            inner_x = (sx >= r.x1 + t) & (sx < r.x2 - t)
            inner_y = (sy >= r.y1 + t) & (sy < r.y2 - t)
            inner = inner_y[:, None] & inner_x[None, :]
            patch[~inner] = PALETTE[cell.border]
            patch[inner] = PALETTE["panel"]
        u = (sx - g.x1) / (g.x2 - g.x1)
        v = (sy - g.y1) / (g.y2 - g.y1)
        uu, vv = np.meshgrid(u, v)
        inside = (uu >= 0) & (uu < 1) & (vv >= 0) & (vv < 1)
        if cell.shape == "circle":
            mask = inside & ((uu - 0.5) ** 2 + (vv - 0.5) ** 2 <= 0.25)
        elif cell.shape == "triangle":
            mask = inside & (np.abs(uu - 0.5) <= vv / 2)
        else:
            mask = inside
        patch[mask] = PALETTE[cell.color]
        fu = (uu - 0.3) / 0.4
        fv = (vv - 0.35) / 0.6
        in_font = (fu >= 0) & (fu < 1) & (fv >= 0) & (fv < 1)
        bits = _FONT_BITS[cell.digit]
        col = np.clip((fu * 3).astype(int), 0, 2)
        row = np.clip((fv * 5).astype(int), 0, 4)
        patch[in_font & bits[row, col]] = PALETTE["white"]
    return img


def render(scene: Scene, bbox: BBox, out_w: int, out_h: int, provenance: Crop | None = None,
           min_area: float = MIN_BOX_AREA) -> Image:
    """Render the canvas window ``bbox`` at ``out_w`` x ``out_h`` pixels."""
    if out_w < MIN_RESOLUTION or out_h < MIN_RESOLUTION:
        raise DegenerateBox(f"output resolution {out_w}x{out_h} below {MIN_RESOLUTION}")
    if bbox.area < min_area:
        raise DegenerateBox(f"window area {bbox.area:.3g} below {min_area:g}")
    return Image(width=out_w, height=out_h, window=bbox, scene=scene, provenance=provenance)


def dataset_record(scene: Scene, qa: QAPair) -> dict:
    return {
        "seed": scene.seed,
        "difficulty": scene.difficulty,
        "question": qa.question,
        "answer": qa.answer,
        "target_region": list(qa.target_region.as_tuple()),
    }

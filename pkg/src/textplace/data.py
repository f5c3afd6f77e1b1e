"""Dataset files, test splits and the seeded synthetic layout generator.

On disk a dataset is UTF-8 JSON Lines, one record per layout::

    {"id": "...", "canvas_width": 256, "canvas_height": 256, "target_index": 2,
     "elements": [{"kind": "coloredBackground", "text": "", "left": 0.0, "top": 0.0,
                   "width": 1.0, "height": 1.0, "angle": 0.0, "color": [250, 240, 230],
                   "font_id": 0, "raster_path": "rasters/x.ppm"}, ...]}

``raster_path`` is optional and resolves relative to the dataset file; rasters
are binary PPM. Character and line counts are derived from ``text``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layout import BBox, Element, ElementKind, Layout, Raster, text_counts, validate_layout

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class LayoutList(list):
    """A list of layouts that also remembers how many records the loader skipped."""

    def __init__(self, items: Iterable[Layout] = (), skipped: int = 0):
        super().__init__(items)
        self.skipped = skipped


def _element_from_record(rec: dict, base: Path) -> Element:
    kind = ElementKind.parse(rec["kind"])
    bbox = BBox(float(rec["left"]), float(rec["top"]), float(rec["width"]), float(rec["height"]))
    text = rec.get("text", "") or ""
    raster = None
    if rec.get("raster_path"):
        raster = Raster.load(base / rec["raster_path"])
    color = tuple(int(c) for c in rec.get("color", (0, 0, 0)))
    angle = float(rec.get("angle", 0.0))
    font_id = int(rec.get("font_id", 0))
    chars, lines = text_counts(text) if kind is ElementKind.TEXT else (0, 0)
    return Element(kind, bbox, text, chars, lines, angle, color, font_id, raster)


def layout_from_record(rec: dict, base: str | Path = ".") -> Layout | None:
    """Build a layout from one record; ``None`` when it holds no text element."""
    base = Path(base)
    elements = tuple(_element_from_record(e, base) for e in rec["elements"])
    if not any(e.kind is ElementKind.TEXT for e in elements):
        return None
    layout = Layout(str(rec["id"]), int(rec["canvas_width"]), int(rec["canvas_height"]),
                    elements, int(rec["target_index"]))
    problems = validate_layout(layout)
    if problems:
        raise DatasetError("; ".join(problems))
    gt = layout.target.bbox
    if gt.width <= 0 or gt.height <= 0:
        raise DatasetError("target bbox must have positive width and height")
    return layout


def load_dataset(path: str | Path) -> LayoutList:
    """Load and validate a JSON Lines dataset; records without text are skipped and counted."""
    path = Path(path)
    layouts, skipped = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                layout = layout_from_record(rec, path.parent)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, OSError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if layout is None:
                skipped += 1
            else:
                layouts.append(layout)
    log.info("loaded %d layouts from %s, skipped %d without text", len(layouts), path, skipped)
    return LayoutList(layouts, skipped)


def layout_to_record(layout: Layout, raster_dir: Path | None = None,
                     dataset_dir: Path | None = None) -> dict:
    elements = []
    for i, el in enumerate(layout.elements):
        rec = {
            "kind": el.kind.value, "text": el.text,
            "left": el.bbox.left, "top": el.bbox.top, "width": el.bbox.width, "height": el.bbox.height,
            "angle": el.angle, "color": list(el.color), "font_id": el.font_id,
        }
        if el.raster is not None:
            if raster_dir is None or dataset_dir is None:
                raise ValueError("raster_dir is required to save element rasters")
            raster_path = raster_dir / f"{_safe(layout.id)}_{i}.ppm"
            el.raster.save(raster_path)
            rec["raster_path"] = raster_path.relative_to(dataset_dir).as_posix()
        elements.append(rec)
    return {"id": layout.id, "canvas_width": layout.canvas_width, "canvas_height": layout.canvas_height,
            "target_index": layout.target_index, "elements": elements}


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def save_dataset(layouts: Iterable[Layout], path: str | Path) -> None:
    """Write JSON Lines; element rasters go to ``<stem>_rasters/`` next to the file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raster_dir = path.parent / f"{path.stem}_rasters"
    with open(path, "w", encoding="utf-8") as fh:
        for layout in layouts:
            if any(e.raster is not None for e in layout.elements):
                raster_dir.mkdir(exist_ok=True)
            rec = layout_to_record(layout, raster_dir, path.parent)
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class SplitSpec:
    single_text: list[Layout] = field(default_factory=list)
    multiple_text: list[Layout] = field(default_factory=list)


def split_by_text_count(layouts: Iterable[Layout]) -> SplitSpec:
    """Partition by the number of text elements, the target included."""
    split = SplitSpec()
    for layout in layouts:
        (split.single_text if layout.n_texts == 1 else split.multiple_text).append(layout)
    return split


# synthetic generation ------------------------------------------------------

PALETTE = (
    (230, 57, 70), (29, 53, 87), (69, 123, 157), (42, 157, 143), (233, 196, 106),
    (244, 162, 97), (231, 111, 81), (106, 76, 147), (25, 130, 196), (138, 201, 38),
)
BACKGROUNDS = ((250, 250, 245), (240, 235, 225), (225, 235, 240), (235, 240, 225), (245, 228, 228))
WORDS = ("sale", "new", "spring", "coffee", "open", "today", "fresh", "summer", "event", "join",
         "free", "design", "studio", "market", "night", "make", "soap", "home", "class", "offer")


@dataclass(frozen=True)
class SynthConfig:
    count: int = 100
    seed: int = 0
    canvas: tuple[int, int] = (256, 256)
    context_range: tuple[int, int] = (0, 6)
    container_mode: bool = False
    container_context_range: tuple[int, int] = (2, 4)
    element_size_range: tuple[float, float] = (0.15, 0.4)
    container_size_range: tuple[float, float] = (0.2, 0.4)
    word_range: tuple[int, int] = (1, 4)
    palette: tuple[tuple[int, int, int], ...] = PALETTE
    grid: int = 32
    raster_px: int = 16
    id_prefix: str = "syn"

    def __post_init__(self):
        lo, hi = self.context_range
        if self.count < 0 or not 0 <= lo <= hi:
            raise ValueError("invalid count or context range")
        if self.container_mode:
            c_lo, c_hi = self.container_context_range
            if not 1 <= c_lo <= c_hi:
                raise ValueError("container mode needs at least one context element")
            s_lo, s_hi = self.container_size_range
            if not 0 < s_lo <= s_hi or s_hi * math.ceil(math.sqrt(c_hi)) > 1.0:
                raise ValueError("container larger than canvas")
        s_lo, s_hi = self.element_size_range
        if not 0 < s_lo <= s_hi <= 1.0:
            raise ValueError("invalid element size range")


def _overlaps(a: BBox, b: BBox) -> bool:
    return a.left < b.right and b.left < a.right and a.top < b.bottom and b.top < a.bottom


def _place(rng: np.random.Generator, boxes: list[BBox], w: float, h: float, tries: int = 60) -> BBox | None:
    for _ in range(tries):
        box = BBox(float(rng.uniform(0, 1 - w)), float(rng.uniform(0, 1 - h)), w, h)
        if not any(_overlaps(box, other) for other in boxes):
            return box
    return None


def largest_empty_region(boxes: Sequence[BBox], grid: int) -> BBox | None:
    """Largest-area grid-aligned rectangle whose cells meet none of ``boxes`` with positive area."""
    free = np.ones((grid, grid), dtype=bool)
    edges = np.arange(grid + 1) / grid
    for b in boxes:
        cols = (edges[:-1] < b.right) & (edges[1:] > b.left)
        rows = (edges[:-1] < b.bottom) & (edges[1:] > b.top)
        free[np.ix_(rows, cols)] = False
    best, best_area = None, 0
    heights = np.zeros(grid, dtype=int)
    for r in range(grid):
        heights = np.where(free[r], heights + 1, 0)
        stack: list[int] = []
        for c in range(grid + 1):
            cur = heights[c] if c < grid else 0
            while stack and heights[stack[-1]] >= cur:
                hgt = heights[stack.pop()]
                left = stack[-1] + 1 if stack else 0
                area = hgt * (c - left)
                if area > best_area:
                    best_area, best = area, (r - hgt + 1, left, hgt, c - left)
            stack.append(c)
    if best is None:
        return None
    top, left, hgt, wid = best
    return BBox(left / grid, top / grid, wid / grid, hgt / grid)


def _random_text(rng: np.random.Generator, cfg: SynthConfig) -> str:
    n = int(rng.integers(cfg.word_range[0], cfg.word_range[1] + 1))
    words = [WORDS[int(i)] for i in rng.integers(0, len(WORDS), size=n)]
    if n >= 3 and rng.random() < 0.5:
        cut = n // 2
        return " ".join(words[:cut]) + "\n" + " ".join(words[cut:])
    return " ".join(words)


def _text_fill(text: str) -> tuple[float, float]:
    """Fraction of the host region covered by a text box, from its length and line count."""
    chars, lines = text_counts(text)
    return 0.45 + 0.4 * min(1.0, chars / 24.0), 0.35 + 0.2 * (lines - 1)


def _texture(rng: np.random.Generator, cfg: SynthConfig) -> Raster:
    blocks = rng.integers(0, len(cfg.palette), size=(4, 4))
    arr = np.asarray(cfg.palette, dtype=np.uint8)[blocks]
    arr = np.repeat(np.repeat(arr, cfg.raster_px // 4, axis=0), cfg.raster_px // 4, axis=1)
    return Raster.from_array(arr)


def _frame(cfg: SynthConfig) -> Raster:
    n = cfg.raster_px
    arr = np.full((n, n, 3), 255, dtype=np.uint8)
    t = max(1, n // 5)
    arr[:t], arr[-t:], arr[:, :t], arr[:, -t:] = 0, 0, 0, 0
    return Raster.from_array(arr)


def _centered(host: BBox, fw: float, fh: float) -> BBox:
    w, h = host.width * fw, host.height * fh
    cx, cy = host.center
    return BBox(cx - w / 2, cy - h / 2, w, h)


def _background(rng: np.random.Generator) -> Element:
    color = BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))]
    return Element.shape(ElementKind.BACKGROUND, (0.0, 0.0, 1.0, 1.0), color=color)


def _free_layout(rng: np.random.Generator, cfg: SynthConfig, layout_id: str) -> Layout:
    while True:
        n = int(rng.integers(cfg.context_range[0], cfg.context_range[1] + 1))
        boxes: list[BBox] = []
        elements: list[Element] = [_background(rng)]
        for _ in range(n):
            lo, hi = cfg.element_size_range
            box = _place(rng, boxes, float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
            if box is None:
                continue
            boxes.append(box)
            color = cfg.palette[int(rng.integers(len(cfg.palette)))]
            kind = (ElementKind.IMAGE, ElementKind.SVG, ElementKind.MASK, ElementKind.TEXT)[int(rng.integers(4))]
            if kind is ElementKind.TEXT:
                elements.append(Element.text_element(_random_text(rng, cfg), box, color=color,
                                                     font_id=int(rng.integers(1, 6))))
            elif kind is ElementKind.SVG:
                elements.append(Element.shape(kind, box, color=color))
            else:
                elements.append(Element.shape(kind, box, color=color, raster=_texture(rng, cfg)))
        region = largest_empty_region(boxes, cfg.grid)
        if region is not None:
            break
    text = _random_text(rng, cfg)
    target = Element.text_element(text, _centered(region, *_text_fill(text)), color=(20, 20, 20),
                                  font_id=int(rng.integers(1, 6)))
    position = int(rng.integers(1, len(elements) + 1))
    elements.insert(position, target)
    return Layout(layout_id, cfg.canvas[0], cfg.canvas[1], tuple(elements), position)


def _container_layout(rng: np.random.Generator, cfg: SynthConfig, layout_id: str) -> tuple[Layout, int]:
    lo, hi = cfg.container_size_range
    while True:
        k = int(rng.integers(cfg.container_context_range[0], cfg.container_context_range[1] + 1))
        boxes: list[BBox] = []
        for _ in range(k):
            box = _place(rng, boxes, float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
            if box is None:
                break
            boxes.append(box)
        if len(boxes) == k:
            break
    container = int(rng.integers(k))
    elements = [_background(rng)]
    for i, box in enumerate(boxes):
        color = cfg.palette[int(rng.integers(len(cfg.palette)))]
        raster = _frame(cfg) if i == container else _texture(rng, cfg)
        elements.append(Element.shape(ElementKind.IMAGE, box, color=color, raster=raster))
    text = _random_text(rng, cfg)
    target = Element.text_element(text, _centered(boxes[container], *_text_fill(text)),
                                  color=(20, 20, 20), font_id=int(rng.integers(1, 6)))
    elements.append(target)
    return Layout(layout_id, cfg.canvas[0], cfg.canvas[1], tuple(elements), len(elements) - 1), container + 1


def generate_synthetic(cfg: SynthConfig) -> list[Layout]:
    """Seeded synthetic corpus.

    Free mode puts the target inside the largest empty grid region, sized by its
    text length. Container mode adds same-kind, same-distribution image
    elements of which one (with a framed white raster) hosts the centered target.
    """
    return [layout for layout, _ in generate_with_containers(cfg)]


def generate_with_containers(cfg: SynthConfig) -> list[tuple[Layout, int | None]]:
    """Like :func:`generate_synthetic`, also returning the container element index (container mode)."""
    out = []
    for i in range(cfg.count):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i]))
        layout_id = f"{cfg.id_prefix}-{cfg.seed}-{i:05d}"
        if cfg.container_mode:
            out.append(_container_layout(rng, cfg, layout_id))
        else:
            out.append((_free_layout(rng, cfg, layout_id), None))
    return out

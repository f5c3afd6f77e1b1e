"""Layered layout types, validation and a deterministic proxy rasterizer.

Coordinates are canvas fractions. A box covers pixel ``(r, c)`` of a
``W x H`` raster iff the pixel center ``((c + 0.5) / W, (r + 0.5) / H)``
lies in ``[left, left + width) x [top, top + height)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

WHITE = (255, 255, 255)


class ElementKind(str, Enum):
    TEXT = "textElement"
    IMAGE = "imageElement"
    MASK = "maskElement"
    SVG = "svgElement"
    BACKGROUND = "coloredBackground"

    @classmethod
    def parse(cls, name: str) -> "ElementKind":
        try:
            return cls(name)
        except ValueError:
            raise ValueError(f"unknown element kind: {name!r}") from None


KIND_ORDER = tuple(ElementKind)


@dataclass(frozen=True)
class BBox:
    left: float
    top: float
    width: float
    height: float

    def __post_init__(self):
        vals = tuple(float(v) for v in (self.left, self.top, self.width, self.height))
        for name, v in zip(("left", "top", "width", "height"), vals):
            object.__setattr__(self, name, v)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite bbox")
        if self.width < 0 or self.height < 0:
            raise ValueError("negative bbox size")

    @classmethod
    def of(cls, box: "BBox | Sequence[float]") -> "BBox":
        if isinstance(box, BBox):
            return box
        left, top, width, height = (float(v) for v in box)
        return cls(left, top, width, height)

    @property
    def right(self) -> float:
        return self.left + self.width

    @property
    def bottom(self) -> float:
        return self.top + self.height

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + self.width / 2, self.top + self.height / 2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.width, self.height)


@dataclass(frozen=True)
class Raster:
    """Row-major RGB image."""

    width: int
    height: int
    pixels: bytes = field(repr=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("invalid raster size")
        if len(self.pixels) != self.width * self.height * 3:
            raise ValueError(
                f"pixel buffer has {len(self.pixels)} bytes, "
                f"expected {self.width * self.height * 3}"
            )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Raster":
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"expected HxWx3 array, got shape {arr.shape}")
        return cls(arr.shape[1], arr.shape[0], arr.tobytes())

    @classmethod
    def filled(cls, width: int, height: int, color=WHITE) -> "Raster":
        if width <= 0 or height <= 0:
            raise ValueError("invalid raster size")
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:] = color
        return cls.from_array(arr)

    def to_array(self) -> np.ndarray:
        """Read-only ``(height, width, 3)`` uint8 view."""
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3)

    def to_ppm(self) -> bytes:
        return f"P6\n{self.width} {self.height}\n255\n".encode("ascii") + self.pixels

    @classmethod
    def from_ppm(cls, data: bytes) -> "Raster":
        # Header tokens are whitespace separated; comments are not supported.
        tokens: list[bytes] = []
        pos = 0
        while len(tokens) < 4:
            while pos < len(data) and data[pos : pos + 1].isspace():
                pos += 1
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            if start == pos:
                raise ValueError("truncated PPM header")
            tokens.append(data[start:pos])
        if tokens[0] != b"P6" or tokens[3] != b"255":
            raise ValueError("only binary P6 PPM with maxval 255 is supported")
        width, height = int(tokens[1]), int(tokens[2])
        body = data[pos + 1 :]
        return cls(width, height, body[: width * height * 3])

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_ppm())

    @classmethod
    def load(cls, path: str | Path) -> "Raster":
        return cls.from_ppm(Path(path).read_bytes())

    def resized(self, width: int, height: int) -> "Raster":
        """Nearest-neighbour resample (pixel-center sampling)."""
        if (width, height) == (self.width, self.height):
            return self
        if width <= 0 or height <= 0:
            raise ValueError("invalid raster size")
        src = self.to_array()
        rows = np.minimum(((np.arange(height) + 0.5) * self.height / height).astype(int), self.height - 1)
        cols = np.minimum(((np.arange(width) + 0.5) * self.width / width).astype(int), self.width - 1)
        return Raster.from_array(src[rows[:, None], cols[None, :]])


def text_counts(text: str) -> tuple[int, int]:
    """(char_count, line_count) of a text payload."""
    return len(text) - text.count("\n"), 1 + text.count("\n")


@dataclass(frozen=True)
class Element:
    kind: ElementKind
    bbox: BBox
    text: str = ""
    char_count: int = 0
    line_count: int = 0
    angle: float = 0.0
    color: tuple[int, int, int] = (0, 0, 0)
    font_id: int = 0
    raster: Raster | None = None

    @classmethod
    def text_element(cls, text: str, bbox, *, color=(0, 0, 0), font_id: int = 0,
                     angle: float = 0.0) -> "Element":
        chars, lines = text_counts(text)
        return cls(ElementKind.TEXT, BBox.of(bbox), text, chars, lines, angle,
                   tuple(color), font_id)

    @classmethod
    def shape(cls, kind: ElementKind | str, bbox, *, color=(0, 0, 0),
              raster: Raster | None = None, angle: float = 0.0) -> "Element":
        kind = ElementKind.parse(kind) if isinstance(kind, str) else kind
        if kind is ElementKind.TEXT:
            raise ValueError("use Element.text_element for text")
        return cls(kind, BBox.of(bbox), color=tuple(color), raster=raster, angle=angle)


@dataclass(frozen=True)
class Layout:
    id: str
    canvas_width: int
    canvas_height: int
    elements: tuple[Element, ...]
    target_index: int

    def __post_init__(self):
        if not isinstance(self.elements, tuple):
            object.__setattr__(self, "elements", tuple(self.elements))

    @property
    def target(self) -> Element:
        return self.elements[self.target_index]

    def context(self) -> list[tuple[int, Element]]:
        """Non-target elements with their list positions, in z-order."""
        return [(i, e) for i, e in enumerate(self.elements) if i != self.target_index]

    @property
    def n_texts(self) -> int:
        return sum(e.kind is ElementKind.TEXT for e in self.elements)

    def with_target_bbox(self, bbox) -> "Layout":
        elements = list(self.elements)
        elements[self.target_index] = replace(self.target, bbox=BBox.of(bbox))
        return replace(self, elements=tuple(elements))

    def reordered(self, order: Sequence[int]) -> "Layout":
        """Layout with elements listed as ``[elements[i] for i in order]``."""
        if sorted(order) != list(range(len(self.elements))):
            raise ValueError("order must be a permutation of element indices")
        elements = tuple(self.elements[i] for i in order)
        return replace(self, elements=elements, target_index=list(order).index(self.target_index))


def validate_layout(layout: Layout) -> list[str]:
    """Return a list of invariant violations; empty when the layout is well formed."""
    problems: list[str] = []
    if layout.canvas_width <= 0 or layout.canvas_height <= 0:
        problems.append("layout: canvas size must be positive")
    if not layout.elements:
        problems.append("layout: no elements")
        return problems
    if not 0 <= layout.target_index < len(layout.elements):
        problems.append(f"layout: target_index {layout.target_index} out of range")
    elif layout.target.kind is not ElementKind.TEXT:
        problems.append(f"element {layout.target_index}: target not textElement")

    for i, el in enumerate(layout.elements):
        if not isinstance(el.kind, ElementKind):
            problems.append(f"element {i}: unknown kind {el.kind!r}")
            continue
        if len(el.color) != 3 or any(not 0 <= c <= 255 for c in el.color):
            problems.append(f"element {i}: color out of range")
        if not math.isfinite(el.angle):
            problems.append(f"element {i}: non-finite angle")
        if el.char_count < 0 or el.line_count < 0:
            problems.append(f"element {i}: negative counts")
        if el.kind is ElementKind.TEXT:
            chars, lines = text_counts(el.text)
            if el.char_count != chars:
                problems.append(f"element {i}: char_count mismatch")
            if el.line_count != lines:
                problems.append(f"element {i}: line_count mismatch")
        else:
            if el.text or el.char_count or el.line_count or el.font_id:
                problems.append(f"element {i}: text attributes on non-text element")
    return problems


def pixel_mask(bbox: BBox, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean row and column coverage vectors for ``bbox`` on a ``width x height`` grid."""
    cx = (np.arange(width) + 0.5) / width
    cy = (np.arange(height) + 0.5) / height
    cols = (cx >= bbox.left) & (cx < bbox.left + bbox.width)
    rows = (cy >= bbox.top) & (cy < bbox.top + bbox.height)
    return rows, cols


def _draw(canvas: np.ndarray, el: Element) -> None:
    height, width = canvas.shape[:2]
    rows, cols = pixel_mask(el.bbox, width, height)
    if not rows.any() or not cols.any():
        return
    r_idx = np.flatnonzero(rows)
    c_idx = np.flatnonzero(cols)
    if el.raster is not None and el.kind in (ElementKind.IMAGE, ElementKind.MASK, ElementKind.SVG):
        src = el.raster.to_array()
        u = ((c_idx + 0.5) / width - el.bbox.left) / el.bbox.width
        v = ((r_idx + 0.5) / height - el.bbox.top) / el.bbox.height
        sc = np.minimum((u * el.raster.width).astype(int), el.raster.width - 1)
        sr = np.minimum((v * el.raster.height).astype(int), el.raster.height - 1)
        canvas[np.ix_(r_idx, c_idx)] = src[sr[:, None], sc[None, :]]
    else:
        # text is drawn glyph-free as a filled box of its color
        canvas[np.ix_(r_idx, c_idx)] = el.color


def _blank(width: int, height: int) -> np.ndarray:
    if width <= 0 or height <= 0:
        raise ValueError("invalid raster size")
    canvas = np.empty((height, width, 3), dtype=np.uint8)
    canvas[:] = WHITE
    return canvas


def render_layout(layout: Layout, exclude_target: bool = True,
                  out_width: int | None = None, out_height: int | None = None) -> Raster:
    """Composite the layout bottom-to-top on white.

    Output size defaults to the canvas size.
    """
    width = layout.canvas_width if out_width is None else out_width
    height = layout.canvas_height if out_height is None else out_height
    canvas = _blank(width, height)
    for i, el in enumerate(layout.elements):
        if exclude_target and i == layout.target_index:
            continue
        _draw(canvas, el)
    return Raster.from_array(canvas)


def render_element(element: Element, out_width: int, out_height: int) -> Raster:
    canvas = _blank(out_width, out_height)
    _draw(canvas, element)
    return Raster.from_array(canvas)


def render_elements(elements: Iterable[Element], out_width: int, out_height: int) -> Raster:
    canvas = _blank(out_width, out_height)
    for el in elements:
        _draw(canvas, el)
    return Raster.from_array(canvas)

"""Element featurization and the small trainable encoders that turn elements into tokens.

Featurization (:func:`featurize`) is parameter-free and produces everything
the network consumes for one layout: a numeric attribute matrix, byte
histograms of the text payloads, and rasters. The token order is
``[whole_image, *context elements in list order, target_text]``.

Numeric slot layout per token::

    role one-hot (3) | bbox (4) | angle in radians (1) | color / 255 (3)
    | char_count / 100, line_count / 100 (2) | kind one-hot (5) | font one-hot (font_vocab)

The target token's bbox slots are always zero and its raster is rendered
from a full-frame copy of the element, so nothing about the target's
geometry reaches the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .layout import BBox, Element, ElementKind, KIND_ORDER, Layout, Raster, render_element, render_layout
from .nn import autograd as ag
from .nn.autograd import Tensor

ROLES = ("target_text", "context_element", "whole_image")
FULL_FRAME = BBox(0.0, 0.0, 1.0, 1.0)

ROLE_SLICE = slice(0, 3)
BBOX_SLICE = slice(3, 7)
ANGLE_SLICE = slice(7, 8)
COLOR_SLICE = slice(8, 11)
COUNT_SLICE = slice(11, 13)
KIND_SLICE = slice(13, 18)
FONT_START = 18


@dataclass(frozen=True)
class FeatureConfig:
    raster_size: int = 32
    d_model: int = 64
    font_vocab: int = 32
    type_vocab: int = 5
    use_element_rasters: bool = False
    conv_channels: tuple[int, ...] = (8, 16, 16)

    def __post_init__(self):
        if self.raster_size <= 0:
            raise ValueError("raster_size must be positive")
        if self.type_vocab != len(KIND_ORDER):
            raise ValueError(f"type_vocab must be {len(KIND_ORDER)}")
        if self.font_vocab < 1:
            raise ValueError("font_vocab must be at least 1 (index 0 is unknown/none)")
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))

    @property
    def n_numeric(self) -> int:
        return FONT_START + self.font_vocab


@dataclass
class ElementToken:
    embedding: Tensor
    role: str


@dataclass
class LayoutFeatures:
    layout_id: str
    numeric: np.ndarray  # (T, n_numeric)
    text_bags: np.ndarray  # (T, 256) byte frequencies, rows sum to 1 or 0
    text_present: np.ndarray  # (T,) bool
    images: np.ndarray  # (M, 3, S, S) in [0, 1]
    image_rows: np.ndarray  # (M,) token index of each image
    roles: tuple[str, ...]

    @property
    def n_tokens(self) -> int:
        return len(self.roles)

    @property
    def target_row(self) -> int:
        return self.n_tokens - 1

    def same_as(self, other: "LayoutFeatures") -> bool:
        """Bitwise equality of every model input."""
        return (
            self.roles == other.roles
            and np.array_equal(self.numeric, other.numeric)
            and np.array_equal(self.text_bags, other.text_bags)
            and np.array_equal(self.text_present, other.text_present)
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.image_rows, other.image_rows)
        )


def build_font_vocab(layouts: Sequence[Layout], font_vocab: int) -> dict[int, int]:
    """Map raw font ids seen in ``layouts`` to one-hot columns; column 0 is unknown/none."""
    counts: dict[int, int] = {}
    for layout in layouts:
        for el in layout.elements:
            if el.font_id:
                counts[el.font_id] = counts.get(el.font_id, 0) + 1
    ranked = sorted(counts, key=lambda f: (-counts[f], f))[: font_vocab - 1]
    return {font: col for col, font in enumerate(sorted(ranked), start=1)}


def raster_input(raster: Raster, size: int) -> np.ndarray:
    """(3, size, size) float array in [0, 1]."""
    arr = raster.resized(size, size).to_array()
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def element_raster(element: Element, size: int) -> np.ndarray:
    """The element's appearance stretched over the whole raster; its geometry travels in the bbox slot."""
    return raster_input(render_element(replace(element, bbox=FULL_FRAME), size, size), size)


def text_bag(text: str) -> np.ndarray:
    bag = np.zeros(256)
    data = text.encode("utf-8")
    if data:
        np.add.at(bag, np.frombuffer(data, dtype=np.uint8), 1.0)
        bag /= len(data)
    return bag


def numeric_features(element: Element | None, role: str, config: FeatureConfig,
                     font_index: Mapping[int, int] | None = None) -> np.ndarray:
    """Pre-projection attribute vector of one token."""
    vec = np.zeros(config.n_numeric)
    vec[ROLE_SLICE][ROLES.index(role)] = 1.0
    if role == "whole_image" or element is None:
        return vec
    if role == "context_element":
        vec[BBOX_SLICE] = element.bbox.as_tuple()
    vec[ANGLE_SLICE] = math.radians(element.angle)
    vec[COLOR_SLICE] = np.asarray(element.color, dtype=np.float64) / 255.0
    vec[COUNT_SLICE] = (element.char_count / 100.0, element.line_count / 100.0)
    vec[KIND_SLICE][KIND_ORDER.index(element.kind)] = 1.0
    if font_index is None:
        col = element.font_id if 0 <= element.font_id < config.font_vocab else 0
    else:
        col = font_index.get(element.font_id, 0)
    vec[FONT_START + col] = 1.0
    return vec


def featurize(layout: Layout, config: FeatureConfig,
              font_index: Mapping[int, int] | None = None) -> LayoutFeatures:
    size = config.raster_size
    roles = ["whole_image"]
    numeric = [numeric_features(None, "whole_image", config)]
    texts = [""]
    images = [raster_input(render_layout(layout, True, size, size), size)]
    image_rows = [0]
    for _, el in layout.context():
        row = len(roles)
        roles.append("context_element")
        numeric.append(numeric_features(el, "context_element", config, font_index))
        texts.append(el.text)
        if config.use_element_rasters:
            images.append(element_raster(el, size))
            image_rows.append(row)
    target = layout.target
    roles.append("target_text")
    numeric.append(numeric_features(target, "target_text", config, font_index))
    texts.append(target.text)
    images.append(element_raster(target, size))
    image_rows.append(len(roles) - 1)
    return LayoutFeatures(
        layout_id=layout.id,
        numeric=np.stack(numeric),
        text_bags=np.stack([text_bag(t) for t in texts]),
        text_present=np.array([bool(t) for t in texts]),
        images=np.stack(images),
        image_rows=np.array(image_rows, dtype=np.intp),
        roles=tuple(roles),
    )


class ImageEncoder(nn.Module):
    """Three stride-2 3x3 convolutions with GELU, flattened and projected to ``d_out``."""

    def __init__(self, raster_size: int, d_out: int, rng: np.random.Generator,
                 channels: Sequence[int] = (8, 16, 16)):
        self.raster_size = raster_size
        convs = []
        c_in, side = 3, raster_size
        for c_out in channels:
            convs.append(nn.Conv2d(c_in, c_out, 3, rng, stride=2, padding=1))
            c_in, side = c_out, (side - 1) // 2 + 1
        self.convs = convs
        self.proj = nn.Linear(c_in * side * side, d_out, rng)

    def __call__(self, images) -> Tensor:
        x = ag.as_tensor(images)
        for conv in self.convs:
            x = ag.gelu(conv(x))
        return self.proj(ag.reshape(x, (x.shape[0], -1)))


class TextEncoder(nn.Module):
    """Mean of learned byte embeddings followed by a linear map; empty text maps to ``null``."""

    def __init__(self, d_out: int, rng: np.random.Generator):
        self.bytes = ag.parameter(rng.uniform(-1.0, 1.0, size=(256, d_out)))
        self.proj = nn.Linear(d_out, d_out, rng)
        self.null = ag.parameter(rng.uniform(-1.0, 1.0, size=(d_out,)))

    def __call__(self, bags: np.ndarray, present: np.ndarray) -> Tensor:
        keep = np.asarray(present, dtype=np.float64)[:, None]
        pooled = self.proj(ag.matmul(ag.as_tensor(bags), self.bytes))
        return pooled * keep + ag.reshape(self.null, (1, -1)) * (1.0 - keep)


class ElementEncoder(nn.Module):
    """Concatenate image, text and attribute features per token and project to ``d_model``.

    Image and text embeddings are layer-normalized before fusion so that neither
    modality starts out orders of magnitude smaller than the other.
    """

    def __init__(self, config: FeatureConfig, rng: np.random.Generator):
        d = config.d_model
        self.image = ImageEncoder(config.raster_size, d, rng, config.conv_channels)
        self.text = TextEncoder(d, rng)
        self.image_norm = nn.LayerNorm(d)
        self.text_norm = nn.LayerNorm(d)
        self.fuse = nn.Linear(2 * d + config.n_numeric, d, rng)
        self.d_model = d

    def __call__(self, numeric: np.ndarray, text_bags: np.ndarray, text_present: np.ndarray,
                 images: np.ndarray, image_rows: np.ndarray) -> Tensor:
        """All arrays are flat over tokens; returns (n_tokens, d_model)."""
        n = numeric.shape[0]
        if len(image_rows):
            img = ag.scatter_rows(self.image_norm(self.image(images)), image_rows, n)
        else:
            img = ag.as_tensor(np.zeros((n, self.d_model)))
        txt = self.text_norm(self.text(text_bags, text_present))
        return self.fuse(ag.concat([img, txt, ag.as_tensor(numeric)], axis=-1))

    def encode_features(self, feats: LayoutFeatures) -> Tensor:
        return self(feats.numeric, feats.text_bags, feats.text_present, feats.images, feats.image_rows)


def encode_image(raster: Raster, params: ImageEncoder | ElementEncoder, raster_size: int | None = None) -> Tensor:
    """Embed one raster; returns shape (d_model,)."""
    enc = params.image if isinstance(params, ElementEncoder) else params
    out = enc(raster_input(raster, raster_size or enc.raster_size)[None])
    return ag.reshape(out, (out.shape[1],))


def encode_text(text: str, params: TextEncoder | ElementEncoder) -> Tensor:
    enc = params.text if isinstance(params, ElementEncoder) else params
    out = enc(text_bag(text)[None], np.array([bool(text)]))
    return ag.reshape(out, (out.shape[1],))


def encode_element(element: Element | None, role: str, config: FeatureConfig, params: ElementEncoder,
                   font_index: Mapping[int, int] | None = None, raster: Raster | None = None) -> ElementToken:
    """Encode one token.

    ``raster`` is required for ``whole_image`` (the rendered layout without the
    target); for other roles the element is rendered here.
    """
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    size = config.raster_size
    if role == "whole_image":
        if raster is None:
            raise ValueError("whole_image token needs the rendered layout raster")
        image = raster_input(raster, size)
        text = ""
    else:
        if element is None:
            raise ValueError(f"{role} token needs an element")
        text = element.text
        if role == "target_text":
            if element.kind is not ElementKind.TEXT:
                raise ValueError("target element must be a textElement")
            image = element_raster(element, size)
        elif config.use_element_rasters:
            image = element_raster(element, size)
        else:
            image = None
    numeric = numeric_features(element, role, config, font_index)[None]
    images = np.zeros((0, 3, size, size)) if image is None else image[None]
    rows = np.zeros(0, dtype=np.intp) if image is None else np.zeros(1, dtype=np.intp)
    out = params(numeric, text_bag(text)[None], np.array([bool(text)]), images, rows)
    return ElementToken(ag.reshape(out, (out.shape[1],)), role)

"""Text box placement on layered graphic layouts."""

from .layout import BBox, Element, ElementKind, Layout, Raster, render_layout, validate_layout
from .metrics import bde, ciou, ciou_loss_grad, iou

__all__ = ["BBox", "Element", "ElementKind", "Layout", "Raster", "bde", "ciou", "ciou_loss_grad",
           "iou", "render_layout", "validate_layout"]

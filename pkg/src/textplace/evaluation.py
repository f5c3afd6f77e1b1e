"""Per-layout evaluation rows, split tables, bucket reports and overlay rendering."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .layout import BBox, Layout, Raster, render_layout, validate_layout
from .metrics import bde, iou
from .vlm import PredictorResponse

log = logging.getLogger(__name__)

GREEN = (0, 255, 0)
RED = (255, 0, 0)
SPLITS = ("single_text", "multiple_text", "all")
NTEXT_BUCKETS = ("1", "2", "3", "4", "5+")

Prediction = BBox | PredictorResponse
Predictor = Callable[[Layout], Prediction]


@dataclass(frozen=True)
class EvalRow:
    layout_id: str
    predictor: str
    pred: BBox | None
    gt: BBox
    iou: float | None
    bde: float | None
    n_elements: int
    n_texts: int
    gt_area: float
    status: str
    error: str | None = None

    @property
    def valid(self) -> bool:
        return self.status != "invalid_format"


class TransformerPredictor:
    """Adapter exposing a trained placement model as a predictor."""

    def __init__(self, model, name: str = "transformer", batch_size: int = 64):
        self.model = model
        self.name = name
        self.batch_size = batch_size

    def __call__(self, layout: Layout) -> BBox:
        from .model import predict

        return predict(layout, self.model)

    def predict_many(self, layouts: Sequence[Layout]) -> list[BBox]:
        from .model import predict_batch

        return predict_batch(layouts, self.model, self.batch_size)


def make_row(layout: Layout, name: str, outcome: Prediction | Exception) -> EvalRow:
    gt = layout.target.bbox
    common = dict(layout_id=layout.id, predictor=name, gt=gt, n_elements=len(layout.elements),
                  n_texts=layout.n_texts, gt_area=gt.area)
    if isinstance(outcome, Exception):
        log.warning("layout %s: predictor %s failed: %s", layout.id, name, outcome)
        return EvalRow(pred=None, iou=None, bde=None, status="invalid_format", error=str(outcome), **common)
    if isinstance(outcome, PredictorResponse):
        status, pred = outcome.status, outcome.parsed
    else:
        status, pred = "valid", BBox.of(outcome)
    if pred is None:
        return EvalRow(pred=None, iou=None, bde=None, status=status, **common)
    return EvalRow(pred=pred, iou=iou(pred, gt), bde=bde(pred, gt), status=status, **common)


def evaluate(predictor: Predictor, layouts: Sequence[Layout], name: str | None = None,
             workers: int = 1) -> list[EvalRow]:
    """One row per layout, in input order.

    A predictor exposing ``predict_many`` is called once on the whole list;
    otherwise layouts are fanned out over ``workers`` threads. Exceptions from
    the predictor become ``invalid_format`` rows.
    """
    for i, layout in enumerate(layouts):
        problems = validate_layout(layout)
        if problems:
            raise ValueError(f"layout #{i} {layout.id!r}: {'; '.join(problems)}")
    name = name or getattr(predictor, "name", type(predictor).__name__)
    many = getattr(predictor, "predict_many", None)
    if many is not None and layouts:
        outcomes = list(many(layouts))
    else:
        def call(layout):
            try:
                return predictor(layout)
            except Exception as exc:  # noqa: BLE001 - recorded per row
                return exc

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outcomes = list(pool.map(call, layouts))
        else:
            outcomes = [call(layout) for layout in layouts]
    return [make_row(layout, name, out) for layout, out in zip(layouts, outcomes)]


# tables --------------------------------------------------------------------

@dataclass(frozen=True)
class SplitMetrics:
    split: str
    count: int
    valid: int
    invalid_format: int
    out_of_range_clamped: int
    mean_iou: float
    mean_bde: float

    @property
    def empty(self) -> bool:
        return self.valid == 0


def split_metrics(split: str, rows: Sequence[EvalRow]) -> SplitMetrics:
    good = [r for r in rows if r.valid]
    return SplitMetrics(
        split=split,
        count=len(rows),
        valid=len(good),
        invalid_format=len(rows) - len(good),
        out_of_range_clamped=sum(r.status == "out_of_range_clamped" for r in rows),
        mean_iou=float(np.mean([r.iou for r in good])) if good else math.nan,
        mean_bde=float(np.mean([r.bde for r in good])) if good else math.nan,
    )


def _combine(parts: Sequence[SplitMetrics]) -> SplitMetrics:
    valid = sum(p.valid for p in parts)

    def weighted(attr):
        if not valid:
            return math.nan
        return sum(p.valid * getattr(p, attr) for p in parts if p.valid) / valid

    return SplitMetrics("all", sum(p.count for p in parts), valid, sum(p.invalid_format for p in parts),
                        sum(p.out_of_range_clamped for p in parts), weighted("mean_iou"), weighted("mean_bde"))


@dataclass(frozen=True)
class ReportTable:
    single_text: SplitMetrics
    multiple_text: SplitMetrics
    all: SplitMetrics

    def rows(self) -> list[SplitMetrics]:
        return [self.single_text, self.multiple_text, self.all]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "count", "valid", "invalid_format", "out_of_range_clamped",
                        "mean_iou", "mean_bde", "empty"])
            for m in self.rows():
                w.writerow([m.split, m.count, m.valid, m.invalid_format, m.out_of_range_clamped,
                            repr(float(m.mean_iou)), repr(float(m.mean_bde)), int(m.empty)])


def report_table(rows: Iterable[EvalRow]) -> ReportTable:
    """Means over valid rows per split; "all" is the valid-count-weighted combination."""
    rows = list(rows)
    single = split_metrics("single_text", [r for r in rows if r.n_texts == 1])
    multiple = split_metrics("multiple_text", [r for r in rows if r.n_texts > 1])
    return ReportTable(single, multiple, _combine([single, multiple]))


def write_rows_csv(rows: Iterable[EvalRow], path: str | Path) -> None:
    def num(v):
        return "" if v is None else repr(float(v))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layout_id", "predictor", "status", "iou", "bde", "n_elements", "n_texts", "gt_area",
                    "pred_left", "pred_top", "pred_width", "pred_height",
                    "gt_left", "gt_top", "gt_width", "gt_height", "error"])
        for r in rows:
            pred = r.pred.as_tuple() if r.pred is not None else (None,) * 4
            w.writerow([r.layout_id, r.predictor, r.status, num(r.iou), num(r.bde), r.n_elements, r.n_texts,
                        num(r.gt_area), *map(num, pred), *map(num, r.gt.as_tuple()), r.error or ""])


def read_rows_csv(path: str | Path) -> list[EvalRow]:
    """Inverse of :func:`write_rows_csv`."""
    def opt(v):
        return None if v == "" else float(v)

    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            pred = [opt(rec[f"pred_{k}"]) for k in ("left", "top", "width", "height")]
            rows.append(EvalRow(
                layout_id=rec["layout_id"], predictor=rec["predictor"],
                pred=None if pred[0] is None else BBox(*pred),
                gt=BBox(*(float(rec[f"gt_{k}"]) for k in ("left", "top", "width", "height"))),
                iou=opt(rec["iou"]), bde=opt(rec["bde"]), n_elements=int(rec["n_elements"]),
                n_texts=int(rec["n_texts"]), gt_area=float(rec["gt_area"]), status=rec["status"],
                error=rec["error"] or None,
            ))
    return rows


# buckets -------------------------------------------------------------------

@dataclass(frozen=True)
class BucketStats:
    bucket: str
    lower: float
    upper: float
    count: int
    invalid_format: int
    mean_iou: float
    median_iou: float
    mean_bde: float
    median_bde: float


def _stats(label: str, lo: float, hi: float, rows: Sequence[EvalRow]) -> BucketStats:
    good = [r for r in rows if r.valid]
    ious = np.array([r.iou for r in good])
    bdes = np.array([r.bde for r in good])

    def agg(fn, arr):
        return float(fn(arr)) if len(arr) else math.nan

    return BucketStats(label, lo, hi, len(good), len(rows) - len(good),
                       agg(np.mean, ious), agg(np.median, ious), agg(np.mean, bdes), agg(np.median, bdes))


def area_edges(areas: Sequence[float], buckets: int) -> np.ndarray:
    """Geometric bin edges spanning the observed (positive) areas."""
    areas = np.asarray(areas, dtype=np.float64)
    lo, hi = float(areas.min()), float(areas.max())
    if lo <= 0:
        raise ValueError("area buckets need positive ground-truth areas")
    if lo == hi:
        return np.array([lo, hi])
    return np.geomspace(lo, hi, buckets + 1)


def bucket_report(rows: Sequence[EvalRow], by: str = "gt_area", buckets: int = 5) -> list[BucketStats]:
    """Per-bucket mean/median IoU and BDE.

    ``gt_area`` uses ``buckets`` geometric bins between the smallest and largest
    ground-truth area (upper edge inclusive in the last bin); ``n_texts`` uses
    the fixed buckets 1, 2, 3, 4 and 5+.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no data")
    if by == "n_texts":
        groups: list[list[EvalRow]] = [[] for _ in NTEXT_BUCKETS]
        for r in rows:
            groups[min(r.n_texts, 5) - 1].append(r)
        return [_stats(label, i + 1, math.inf if label == "5+" else i + 1, g)
                for i, (label, g) in enumerate(zip(NTEXT_BUCKETS, groups))]
    if by == "gt_area":
        edges = area_edges([r.gt_area for r in rows], buckets)
        n = len(edges) - 1
        groups = [[] for _ in range(n)]
        for r in rows:
            k = int(np.searchsorted(edges, r.gt_area, side="right")) - 1
            groups[min(max(k, 0), n - 1)].append(r)
        return [_stats(f"{edges[k]:.6g}-{edges[k + 1]:.6g}", float(edges[k]), float(edges[k + 1]), g)
                for k, g in enumerate(groups)]
    raise ValueError(f"unknown bucket key {by!r}; expected 'gt_area' or 'n_texts'")


def write_buckets_csv(stats: Sequence[BucketStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket", "lower", "upper", "count", "invalid_format",
                    "mean_iou", "median_iou", "mean_bde", "median_bde"])
        for s in stats:
            w.writerow([s.bucket, repr(float(s.lower)), repr(float(s.upper)), s.count, s.invalid_format,
                        *(repr(float(v)) for v in (s.mean_iou, s.median_iou, s.mean_bde, s.median_bde))])


def histogram(rows: Sequence[EvalRow], metric: str = "iou", bins: int = 10) -> list[tuple[float, float, int]]:
    """Counts of a metric over valid rows on equal-width bins of [0, 1]."""
    values = [getattr(r, metric) for r in rows if r.valid]
    counts, edges = np.histogram(np.clip(values, 0.0, 1.0), bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


# overlays ------------------------------------------------------------------

def _outline(canvas: np.ndarray, box: BBox, color) -> None:
    h, w = canvas.shape[:2]
    c0 = math.floor(box.left * w)
    c1 = max(c0, math.ceil(box.right * w) - 1)
    r0 = math.floor(box.top * h)
    r1 = max(r0, math.ceil(box.bottom * h) - 1)
    cols = slice(max(c0, 0), min(c1, w - 1) + 1)
    rows = slice(max(r0, 0), min(r1, h - 1) + 1)
    for r in {r0, r1}:
        if 0 <= r < h:
            canvas[r, cols] = color
    for c in {c0, c1}:
        if 0 <= c < w:
            canvas[rows, c] = color


def render_overlay(layout: Layout, pred: BBox | None, gt: BBox | None = None, out: str | Path | None = None,
                   width: int | None = None, height: int | None = None) -> Raster:
    """Layout (target removed) with 1-px outlines: ground truth in green, prediction in red on top."""
    base = render_layout(layout, True, width, height).to_array().copy()
    gt = layout.target.bbox if gt is None else BBox.of(gt)
    _outline(base, gt, GREEN)
    if pred is not None:
        _outline(base, BBox.of(pred), RED)
    raster = Raster.from_array(base)
    if out is not None:
        raster.save(out)
    return raster

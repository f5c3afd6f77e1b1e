"""Set-Transformer text box placement model and its CIoU training loop."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .encoders import ElementEncoder, FeatureConfig, LayoutFeatures, build_font_vocab, featurize
from .layout import BBox, Layout, validate_layout
from .metrics import ciou_loss_and_grad
from .nn import autograd as ag
from .nn.autograd import Tensor

log = logging.getLogger(__name__)

SIZE_FLOOR = 1e-4


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    head_dim: int | None = None
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    seed: int = 0

    def __post_init__(self):
        if min(self.layers, self.heads, self.d_model, self.d_ff) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.head_dim is None and self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.feature.d_model != self.d_model:
            object.__setattr__(self, "feature", replace(self.feature, d_model=self.d_model))

    @classmethod
    def full_size(cls, **overrides) -> "ModelConfig":
        """Six layers, eight heads, width 256, feed-forward 512."""
        return cls(**{"layers": 6, "heads": 8, "d_model": 256, "d_ff": 512, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        feature = FeatureConfig(**d.pop("feature", {}))
        return cls(feature=feature, **d)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 8
    max_epochs: int = 150
    max_steps: int | None = None
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("lr, batch_size and max_epochs must be positive")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass
class Batch:
    numeric: np.ndarray
    text_bags: np.ndarray
    text_present: np.ndarray
    images: np.ndarray
    image_rows: np.ndarray
    key_mask: np.ndarray  # (B, T) True for real tokens
    target_rows: np.ndarray  # flat token index of each layout's target
    ids: list[str]


def collate(features: Sequence[LayoutFeatures]) -> Batch:
    b = len(features)
    t = max(f.n_tokens for f in features)
    width = features[0].numeric.shape[1]
    numeric = np.zeros((b * t, width))
    bags = np.zeros((b * t, 256))
    present = np.zeros(b * t, dtype=bool)
    mask = np.zeros((b, t), dtype=bool)
    rows, images, targets = [], [], []
    for i, f in enumerate(features):
        base = i * t
        n = f.n_tokens
        numeric[base : base + n] = f.numeric
        bags[base : base + n] = f.text_bags
        present[base : base + n] = f.text_present
        mask[i, :n] = True
        rows.append(f.image_rows + base)
        images.append(f.images)
        targets.append(base + f.target_row)
    return Batch(numeric, bags, present, np.concatenate(images), np.concatenate(rows),
                 mask, np.array(targets, dtype=np.intp), [f.layout_id for f in features])


class PlacementModel(nn.Module):
    """Encodes ``{whole image, context elements, target text}`` and regresses the target box."""

    def __init__(self, config: ModelConfig, font_index: Mapping[int, int] | None = None):
        rng = np.random.default_rng(config.seed)
        self.config = config
        self.font_index = dict(font_index or {})
        self.encoder = ElementEncoder(config.feature, rng)
        self.blocks = [
            nn.TransformerBlock(config.d_model, config.heads, config.d_ff, rng, config.head_dim)
            for _ in range(config.layers)
        ]
        self.norm = nn.LayerNorm(config.d_model)
        self.head = nn.Linear(config.d_model, 4, rng)
        self.optimizer_state: nn.AdamWState | None = None

    def featurize(self, layout: Layout) -> LayoutFeatures:
        return featurize(layout, self.config.feature, self.font_index)

    def forward(self, batch: Batch) -> Tensor:
        """Predicted boxes, shape (B, 4)."""
        b, t = batch.key_mask.shape
        tokens = self.encoder(batch.numeric, batch.text_bags, batch.text_present,
                              batch.images, batch.image_rows)
        x = ag.reshape(tokens, (b, t, self.config.d_model))
        for block in self.blocks:
            x = block(x, batch.key_mask)
        readout = ag.take_rows(ag.reshape(x, (b * t, self.config.d_model)), batch.target_rows)
        boxes = ag.sigmoid(self.head(self.norm(readout)))
        return ag.maximum(boxes, np.array([0.0, 0.0, SIZE_FLOOR, SIZE_FLOOR]))

    def predict_features(self, features: Sequence[LayoutFeatures]) -> np.ndarray:
        if not features:
            return np.zeros((0, 4))
        with ag.no_grad():
            return self.forward(collate(features)).data

    def predict(self, layout: Layout) -> BBox:
        return predict(layout, self)

    def save(self, path: str | Path) -> None:
        config = {"model": self.config.to_dict(),
                  "font_index": [[k, v] for k, v in sorted(self.font_index.items())]}
        nn.save_checkpoint(path, self.state_dict(), self.optimizer_state, config)

    @classmethod
    def load(cls, path: str | Path) -> "PlacementModel":
        params, opt_state, config = nn.load_checkpoint(path)
        model = cls(ModelConfig.from_dict(config["model"]), {k: v for k, v in config["font_index"]})
        model.load_state_dict(params)
        model.optimizer_state = opt_state
        return model


def _check(layout: Layout) -> None:
    problems = validate_layout(layout)
    if problems:
        raise ValueError(f"invalid layout {layout.id!r}: {'; '.join(problems)}")


def predict(layout: Layout, model: PlacementModel) -> BBox:
    _check(layout)
    return BBox(*model.predict_features([model.featurize(layout)])[0])


def predict_batch(layouts: Sequence[Layout], model: PlacementModel, batch_size: int = 64) -> list[BBox]:
    features = []
    for i, layout in enumerate(layouts):
        try:
            _check(layout)
        except ValueError as exc:
            raise ValueError(f"layout #{i}: {exc}") from exc
        features.append(model.featurize(layout))
    out: list[BBox] = []
    for start in range(0, len(features), batch_size):
        out.extend(BBox(*row) for row in model.predict_features(features[start : start + batch_size]))
    return out


def ciou_loss(pred: Tensor, gt: np.ndarray, ids: Sequence[str] | None = None) -> Tensor:
    """Mean ``1 - CIoU`` over the batch, differentiable w.r.t. ``pred``."""
    if not np.all(np.isfinite(pred.data)):
        bad = np.flatnonzero(~np.isfinite(pred.data).all(axis=1))
        names = [ids[i] for i in bad] if ids is not None else bad.tolist()
        raise TrainingError(f"non-finite prediction for layout(s) {names}")
    losses, grads = ciou_loss_and_grad(pred.data, gt)
    if not np.all(np.isfinite(losses)):
        bad = np.flatnonzero(~np.isfinite(losses))
        names = [ids[i] for i in bad] if ids is not None else bad.tolist()
        raise TrainingError(f"non-finite loss for layout(s) {names}")
    n = len(losses)
    return ag.custom([pred], losses.mean(), lambda g: [g * grads / n])


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_loss: float
    val_loss: float
    wall_seconds: float


@dataclass
class TrainingLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    @property
    def best_val_loss(self) -> float:
        return self.records[self.best_epoch - 1].val_loss

    def losses(self) -> list[tuple[int, int, float, float]]:
        """Records without wall-clock time, for reproducibility comparisons."""
        return [(r.epoch, r.steps, r.train_loss, r.val_loss) for r in self.records]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
            for r in self.records:
                writer.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_loss)), f"{r.wall_seconds:.3f}"])


def _gt(layouts: Sequence[Layout]) -> np.ndarray:
    return np.array([layout.target.bbox.as_tuple() for layout in layouts])


def evaluate_loss(model: PlacementModel, features: Sequence[LayoutFeatures], gt: np.ndarray,
                  batch_size: int = 64) -> float:
    preds = np.concatenate([model.predict_features(features[i : i + batch_size])
                            for i in range(0, len(features), batch_size)])
    losses, _ = ciou_loss_and_grad(preds, gt)
    return float(losses.mean())


def train(train_set: Sequence[Layout], val_set: Sequence[Layout], model_cfg: ModelConfig,
          train_cfg: TrainConfig, on_epoch: Callable[[EpochRecord], None] | None = None,
          ) -> tuple[PlacementModel, TrainingLog]:
    """Minimize mean CIoU loss with AdamW; return the lowest-validation-loss weights."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    for layout in list(train_set) + list(val_set):
        _check(layout)
        if layout.target.bbox.width <= 0 or layout.target.bbox.height <= 0:
            raise ValueError(f"layout {layout.id!r}: degenerate ground-truth box")

    font_index = build_font_vocab(train_set, model_cfg.feature.font_vocab)
    model = PlacementModel(model_cfg, font_index)
    opt = nn.AdamW(model.named_parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    train_feats = [model.featurize(layout) for layout in train_set]
    val_feats = [model.featurize(layout) for layout in val_set]
    train_gt, val_gt = _gt(train_set), _gt(val_set)

    rng = np.random.default_rng(train_cfg.seed)
    history = TrainingLog()
    best_state, best_opt, best_val = model.state_dict(), copy.deepcopy(opt.state), np.inf
    steps, started = 0, time.perf_counter()
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(len(train_feats))
        total, seen = 0.0, 0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            batch = collate([train_feats[i] for i in idx])
            opt.zero_grad()
            loss = ciou_loss(model.forward(batch), train_gt[idx], batch.ids)
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            seen += len(idx)
            steps += 1
            if train_cfg.max_steps is not None and steps >= train_cfg.max_steps:
                break
        val_loss = evaluate_loss(model, val_feats, val_gt)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch, steps, total / seen, val_loss, time.perf_counter() - started)
        history.records.append(record)
        if val_loss < best_val:
            best_val, best_state, history.best_epoch = val_loss, model.state_dict(), epoch
            best_opt = copy.deepcopy(opt.state)
        log.info("epoch %d steps %d train %.5f val %.5f", epoch, steps, record.train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(record)
        if train_cfg.max_steps is not None and steps >= train_cfg.max_steps:
            break
    model.load_state_dict(best_state)
    model.optimizer_state = best_opt
    return model, history

import csv
from dataclasses import replace

import numpy as np
import pytest

from oracles import gradcheck
from textplace.data import SynthConfig, generate_synthetic
from textplace.encoders import FeatureConfig
from textplace.layout import Element, Layout
from textplace.metrics import ciou_loss_and_grad, iou
from textplace.model import (
    SIZE_FLOOR,
    ModelConfig,
    PlacementModel,
    TrainConfig,
    TrainingError,
    ciou_loss,
    collate,
    evaluate_loss,
    predict,
    predict_batch,
    train,
)
from textplace.nn import autograd as ag

SMALL = ModelConfig(layers=1, heads=2, d_model=16, d_ff=32,
                    feature=FeatureConfig(raster_size=8, font_vocab=8, conv_channels=(4, 4, 4)))


def layouts(count=8, seed=0, **kw):
    return generate_synthetic(SynthConfig(count=count, seed=seed, **kw))


def permute_contexts(layout: Layout, rng) -> Layout:
    """Shuffle everything but the background, which must stay at the bottom of the z-order."""
    rest = [i for i in range(1, len(layout.elements))]
    return layout.reordered([0, *rng.permutation(rest)])


class TestConfig:
    def test_full_size_dimensions(self):
        cfg = ModelConfig.full_size()
        assert (cfg.layers, cfg.heads, cfg.d_model, cfg.d_ff) == (6, 8, 256, 512)
        assert cfg.feature.d_model == 256

    def test_desk_defaults(self):
        cfg = ModelConfig()
        assert (cfg.layers, cfg.heads, cfg.d_model, cfg.d_ff) == (2, 4, 64, 128)
        t = TrainConfig()
        assert (t.lr, t.batch_size, t.max_epochs) == (1e-4, 8, 150)

    def test_indivisible_heads(self):
        with pytest.raises(ValueError, match="divisible"):
            ModelConfig(d_model=30, heads=4)

    def test_positive_hyperparameters(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0)

    def test_dict_round_trip(self):
        cfg = replace(SMALL, feature=replace(SMALL.feature, use_element_rasters=True))
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestPredict:
    def test_zero_head_gives_half(self):
        model = PlacementModel(SMALL)
        model.head.weight.data[:] = 0
        model.head.bias.data[:] = 0
        for layout in layouts(4):
            assert predict(layout, model).as_tuple() == (0.5, 0.5, 0.5, 0.5)

    def test_output_range(self):
        model = PlacementModel(SMALL)
        model.head.bias.data[:] = [0, 0, -40, -40]
        for box in predict_batch(layouts(6), model):
            assert all(0 < v < 1 for v in box.as_tuple()[:2])
            assert box.width >= SIZE_FLOOR and box.height >= SIZE_FLOOR

    @pytest.mark.parametrize("multi", [False, True])
    def test_context_permutation_invariance(self, multi):
        cfg = replace(SMALL, feature=replace(SMALL.feature, use_element_rasters=multi))
        model = PlacementModel(cfg)
        rng = np.random.default_rng(0)
        for layout in layouts(10, seed=3):
            base = np.array(predict(layout, model).as_tuple())
            for _ in range(3):
                moved = np.array(predict(permute_contexts(layout, rng), model).as_tuple())
                assert np.max(np.abs(moved - base)) < 1e-6

    @pytest.mark.parametrize("multi", [False, True])
    def test_target_leak_freedom(self, multi):
        cfg = replace(SMALL, feature=replace(SMALL.feature, use_element_rasters=multi))
        model = PlacementModel(cfg)
        rng = np.random.default_rng(1)
        for layout in layouts(5, seed=4):
            moved = layout.with_target_bbox(tuple(rng.uniform(0.01, 0.9, 4)))
            assert predict(layout, model) == predict(moved, model)

    def test_invalid_layout(self):
        bad = Layout("bad", 10, 10, (Element.shape("svgElement", (0, 0, 1, 1)),), 0)
        with pytest.raises(ValueError, match="invalid layout"):
            predict(bad, PlacementModel(SMALL))

    def test_batch_matches_single(self):
        model = PlacementModel(SMALL)
        data = layouts(5, seed=5)
        batched = predict_batch(data, model, batch_size=3)
        for layout, box in zip(data, batched):
            assert np.max(np.abs(np.subtract(box.as_tuple(), predict(layout, model).as_tuple()))) < 1e-6
        assert predict_batch(data[:1], model)[0] == predict(data[0], model)

    def test_empty_batch(self):
        assert predict_batch([], PlacementModel(SMALL)) == []

    def test_batch_error_names_index(self):
        bad = Layout("bad", 10, 10, (Element.shape("svgElement", (0, 0, 1, 1)),), 0)
        with pytest.raises(ValueError, match="layout #2"):
            predict_batch([*layouts(2), bad], PlacementModel(SMALL))

    def test_save_load(self, tmp_path):
        model = PlacementModel(SMALL, {3: 1})
        model.save(tmp_path / "m.npz")
        loaded = PlacementModel.load(tmp_path / "m.npz")
        assert loaded.font_index == {3: 1} and loaded.config == SMALL
        data = layouts(3)
        assert predict_batch(data, loaded) == predict_batch(data, model)

    @pytest.mark.parametrize("seed", range(20))
    def test_full_model_gradcheck(self, seed):
        cfg = replace(SMALL, seed=seed, feature=replace(SMALL.feature, raster_size=4, conv_channels=(2, 2, 2)))
        model = PlacementModel(cfg)
        batch = collate([model.featurize(layout) for layout in layouts(2, seed=seed)])
        rng = np.random.default_rng(seed)
        assert gradcheck(lambda: model.forward(batch), model.parameters(), rng, max_coords=4) < 1e-3


class TestLoss:
    def test_matches_metric(self):
        pred = ag.parameter(np.array([[0.1, 0.2, 0.3, 0.4], [0.55, 0.5, 0.2, 0.2]]))
        gt = np.array([[0.2, 0.2, 0.3, 0.3], [0.5, 0.4, 0.3, 0.2]])
        loss = ciou_loss(pred, gt)
        loss.backward()
        losses, grads = ciou_loss_and_grad(pred.data, gt)
        assert float(loss.data) == losses.mean()
        assert np.array_equal(pred.grad, grads / 2)

    def test_nan_names_layout(self):
        pred = ag.parameter(np.array([[0.1, 0.1, 0.2, 0.2], [np.nan, 0.1, 0.2, 0.2]]))
        with pytest.raises(TrainingError, match="poster-17"):
            ciou_loss(pred, np.full((2, 4), 0.3), ["poster-3", "poster-17"])


class TestTrain:
    def test_deterministic_logs(self):
        data = layouts(6)
        cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=3, seed=1)
        _, a = train(data[:4], data[4:], SMALL, cfg)
        _, b = train(data[:4], data[4:], SMALL, cfg)
        assert a.losses() == b.losses()

    def test_returns_best_checkpoint(self):
        data = layouts(8, seed=2)
        model, log = train(data[:6], data[6:], SMALL, TrainConfig(lr=3e-3, batch_size=2, max_epochs=6))
        assert log.best_val_loss <= log.records[-1].val_loss
        assert log.best_val_loss == min(r.val_loss for r in log.records)
        gt = np.array([layout.target.bbox.as_tuple() for layout in data[6:]])
        value = evaluate_loss(model, [model.featurize(layout) for layout in data[6:]], gt)
        assert value == pytest.approx(log.best_val_loss, abs=1e-12)

    def test_max_steps(self):
        data = layouts(6)
        _, log = train(data, data, SMALL, TrainConfig(batch_size=2, max_epochs=50, max_steps=5))
        assert log.records[-1].steps == 5

    def test_log_csv(self, tmp_path):
        data = layouts(4)
        _, log = train(data, data, SMALL, TrainConfig(batch_size=2, max_epochs=2))
        log.write_csv(tmp_path / "log.csv")
        with open(tmp_path / "log.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "train_loss", "val_loss", "wall_seconds"] and len(rows) == 3

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            train([], layouts(1), SMALL, TrainConfig())

    def test_overfits_one_layout(self):
        data = layouts(1, seed=0)
        model, _ = train(data, data, ModelConfig(seed=0), TrainConfig(batch_size=1, max_epochs=500))
        assert iou(predict(data[0], model), data[0].target.bbox) > 0.95

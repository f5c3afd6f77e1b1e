import csv
import json

import pytest

from textplace.cli import main
from textplace.data import load_dataset

TINY = {"model": {"layers": 1, "heads": 2, "d_model": 16, "d_ff": 32,
                  "feature": {"raster_size": 8, "font_vocab": 8, "conv_channels": [4, 4, 4]}},
        "train": {"batch_size": 4, "max_epochs": 2, "lr": 1e-3}}


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "d.jsonl"
    assert main(["gen", "--count", "12", "--seed", "3", "--out", str(path)]) == 0
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen(dataset, capsys):
    assert len(load_dataset(dataset)) == 12


def test_gen_container(tmp_path):
    assert main(["gen", "--count", "4", "--container", "--out", str(tmp_path / "c")]) == 0
    assert len(load_dataset(tmp_path / "c" / "layouts.jsonl")) == 4
    assert any((tmp_path / "c").glob("layouts_rasters/*.ppm"))


def test_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        main(["gen", "--count", "5", "--seed", "9", "--out", str(tmp_path / name)])
    assert (tmp_path / "a" / "layouts.jsonl").read_bytes() == (tmp_path / "b" / "layouts.jsonl").read_bytes()


def test_eval_mock(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["eval", "--data", str(dataset), "--predictor", "mock", "--mock-bbox", "0.1,0.1,0.3,0.2",
                 "--out", str(out), "--overlays", "3"])
    assert code == 0
    rows = read_csv(out / "metrics.csv")
    assert len(rows) == 12 and {r["status"] for r in rows} == {"valid"}
    assert [r["split"] for r in read_csv(out / "table.csv")] == ["single_text", "multiple_text", "all"]
    for name in ("buckets_area.csv", "buckets_ntext.csv", "hist_iou.csv", "hist_bde.csv"):
        assert (out / name).exists()
    assert len(list((out / "overlays").glob("*.ppm"))) == 3
    assert len((out / "transcripts.jsonl").read_text().splitlines()) == 12
    assert "all" in capsys.readouterr().out


def test_eval_prose_marks_empty(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["eval", "--data", str(dataset), "--predictor", "mock", "--mock-prose", "--out", str(out)]) == 0
    table = read_csv(out / "table.csv")
    assert table[-1]["invalid_format"] == "12" and table[-1]["empty"] == "1"
    assert "(empty)" in capsys.readouterr().out


def test_report_from_metrics(dataset, tmp_path):
    main(["eval", "--data", str(dataset), "--predictor", "mock", "--out", str(tmp_path / "a")])
    assert main(["report", "--data", str(tmp_path / "a" / "metrics.csv"), "--area-bins", "3",
                 "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "table.csv").read_bytes() == (tmp_path / "b" / "table.csv").read_bytes()
    assert len(read_csv(tmp_path / "b" / "buckets_area.csv")) == 3


def test_query_tally(dataset, tmp_path, capsys):
    assert main(["query", "--data", str(dataset), "--predictor", "mock", "--mock-prose",
                 "--out", str(tmp_path / "q")]) == 0
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1]) == {
        "valid": 0, "invalid_format": 12, "out_of_range_clamped": 0}


def test_prompt_stdout(dataset, capsys):
    assert main(["prompt", "--data", str(dataset)]) == 0
    text = capsys.readouterr().out
    assert text.startswith("[\n{") and text.count('"left":null') == 12


def test_prompt_files(dataset, tmp_path):
    assert main(["prompt", "--data", str(dataset), "--out", str(tmp_path / "p")]) == 0
    lines = [json.loads(x) for x in (tmp_path / "p" / "prompts.jsonl").read_text().splitlines()]
    assert len(lines) == 12 and (tmp_path / "p" / lines[0]["image"]).exists()


def test_train_then_eval(dataset, tmp_path):
    config = tmp_path / "tiny.json"
    config.write_text(json.dumps(TINY))
    out = tmp_path / "train"
    assert main(["train", "--data", str(dataset), "--config", str(config), "--out", str(out)]) == 0
    assert (out / "model.npz").exists()
    assert len(read_csv(out / "training_log.csv")) == 2
    assert main(["eval", "--data", str(dataset), "--model", str(out / "model.npz"),
                 "--out", str(tmp_path / "ev")]) == 0
    assert read_csv(tmp_path / "ev" / "metrics.csv")[0]["predictor"] == "transformer"
    assert main(["render", "--data", str(dataset), "--model", str(out / "model.npz"),
                 "--out", str(tmp_path / "r")]) == 0
    assert len(list((tmp_path / "r" / "overlays").glob("*.ppm"))) == 12


class TestExitCodes:
    def test_unknown_command(self, capsys):
        assert main(["fly"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_missing_out(self, dataset):
        assert main(["eval", "--data", str(dataset), "--predictor", "mock"]) == 1

    def test_bad_bbox_flag(self, dataset, tmp_path):
        assert main(["eval", "--data", str(dataset), "--predictor", "mock", "--mock-bbox", "1,2",
                     "--out", str(tmp_path)]) == 1

    def test_unknown_config_key(self, dataset, tmp_path):
        config = tmp_path / "c.json"
        config.write_text(json.dumps({"train": {"learning_rate": 1}}))
        assert main(["train", "--data", str(dataset), "--config", str(config), "--out", str(tmp_path)]) == 1

    def test_transformer_needs_model(self, dataset, tmp_path):
        assert main(["eval", "--data", str(dataset), "--out", str(tmp_path)]) == 1

    def test_missing_dataset(self, tmp_path, capsys):
        assert main(["eval", "--data", str(tmp_path / "none.jsonl"), "--predictor", "mock",
                     "--out", str(tmp_path)]) == 2
        assert "data error" in capsys.readouterr().err

    def test_malformed_dataset(self, tmp_path):
        (tmp_path / "bad.jsonl").write_text("{oops\n")
        assert main(["prompt", "--data", str(tmp_path / "bad.jsonl")]) == 2

    def test_unconfigured_external_predictor(self, dataset, tmp_path, monkeypatch, capsys):
        monkeypatch.delenv("TEXTPLACE_BASE_URL", raising=False)
        assert main(["eval", "--data", str(dataset), "--predictor", "external", "--out", str(tmp_path)]) == 3
        assert "predictor error" in capsys.readouterr().err

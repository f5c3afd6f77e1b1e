"""Command-line entry point: ``textplace <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 predictor error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetError, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .evaluation import (
    EvalRow,
    TransformerPredictor,
    bucket_report,
    evaluate,
    histogram,
    read_rows_csv,
    render_overlay,
    report_table,
    write_buckets_csv,
    write_rows_csv,
)
from .layout import BBox
from .vlm import (
    EndpointConfig,
    HttpChatEndpoint,
    MockEndpoint,
    PredictorError,
    TranscriptLog,
    VLMPredictor,
    serialize_prompt,
    tally_invalid,
)

log = logging.getLogger("textplace")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_PREDICTOR = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _tuples(value):
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _section(config: dict, name: str, cls) -> dict:
    section = config.get(name, {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown {name} config keys: {sorted(unknown)}")
    return {k: _tuples(v) for k, v in section.items()}


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(config, dict):
        raise UsageError("config must be a JSON object")
    return config


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: str | None):
    if path is None:
        raise UsageError("--data is required")
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise DatasetError(str(exc)) from exc


def cmd_gen(args, config) -> int:
    cfg = SynthConfig(**_section(config, "synth", SynthConfig))
    overrides = {"seed": args.seed}
    if args.count is not None:
        overrides["count"] = args.count
    if args.container:
        overrides["container_mode"] = True
    cfg = replace(cfg, **overrides)
    out = Path(args.out)
    path = out if out.suffix == ".jsonl" else out / "layouts.jsonl"
    save_dataset(generate_synthetic(cfg), path)
    print(f"wrote {cfg.count} layouts to {path}")
    return EXIT_OK


def cmd_train(args, config) -> int:
    from .encoders import FeatureConfig
    from .model import ModelConfig, TrainConfig, train

    train_set = list(_load(args.data))
    if args.val:
        val_set = list(_load(args.val))
    else:
        if len(train_set) < 2:
            raise DatasetError("need at least 2 layouts to hold out a validation set")
        order = np.random.default_rng(args.seed).permutation(len(train_set))
        n_val = max(1, len(train_set) // 10)
        val_set = [train_set[i] for i in order[:n_val]]
        train_set = [train_set[i] for i in order[n_val:]]
    model_section = _section(config, "model", ModelConfig)
    feature = FeatureConfig(**{k: _tuples(v) for k, v in model_section.pop("feature", {}).items()})
    if args.multi_image:
        feature = replace(feature, use_element_rasters=True)
    model_cfg = ModelConfig(**{**model_section, "feature": feature, "seed": args.seed})
    train_cfg = TrainConfig(**{**_section(config, "train", TrainConfig), "seed": args.seed})
    out = _out_dir(args)
    model, history = train(train_set, val_set, model_cfg, train_cfg,
                           on_epoch=lambda r: print(f"epoch {r.epoch} train {r.train_loss:.5f} "
                                                    f"val {r.val_loss:.5f}", flush=True))
    path = Path(args.model) if args.model else out / "model.npz"
    model.save(path)
    history.write_csv(out / "training_log.csv")
    print(f"best epoch {history.best_epoch} val loss {history.best_val_loss:.5f}; saved {path}")
    return EXIT_OK


def make_predictor(args, transcript: TranscriptLog | None):
    if args.predictor == "transformer":
        if not args.model:
            raise UsageError("--model is required for the transformer predictor")
        from .model import PlacementModel

        try:
            model = PlacementModel.load(args.model)
        except (OSError, KeyError, ValueError) as exc:
            raise DatasetError(f"cannot load model {args.model}: {exc}") from exc
        return TransformerPredictor(model, "transformer-multi" if model.config.feature.use_element_rasters
                                    else "transformer")
    if args.predictor == "mock":
        if args.mock_prose:
            endpoint = MockEndpoint.prose()
        else:
            endpoint = MockEndpoint.fixed(args.mock_bbox)
        return VLMPredictor(endpoint, name="mock", retries=args.retries, transcript=transcript)
    cfg = EndpointConfig.from_env()
    return VLMPredictor(HttpChatEndpoint(cfg), name=cfg.model or "external", retries=cfg.retries,
                        transcript=transcript)


def _write_reports(rows: Sequence[EvalRow], out: Path, area_bins: int) -> None:
    report_table(rows).write_csv(out / "table.csv")
    if rows:
        write_buckets_csv(bucket_report(rows, "gt_area", area_bins), out / "buckets_area.csv")
        write_buckets_csv(bucket_report(rows, "n_texts"), out / "buckets_ntext.csv")
        for metric in ("iou", "bde"):
            with open(out / f"hist_{metric}.csv", "w") as fh:
                fh.write("lower,upper,count\n")
                for lo, hi, n in histogram(rows, metric):
                    fh.write(f"{lo!r},{hi!r},{n}\n")


def _print_table(rows: Sequence[EvalRow]) -> None:
    for m in report_table(rows).rows():
        flag = "  (empty)" if m.empty else ""
        print(f"{m.split:14s} n={m.count:5d} valid={m.valid:5d} IoU={m.mean_iou:.4f} BDE={m.mean_bde:.4f}{flag}")


def cmd_eval(args, config) -> int:
    layouts = _load(args.data)
    out = _out_dir(args)
    with TranscriptLog(out / "transcripts.jsonl") as transcript:
        predictor = make_predictor(args, transcript)
        rows = evaluate(predictor, layouts, workers=args.workers)
    write_rows_csv(rows, out / "metrics.csv")
    _write_reports(rows, out, args.area_bins)
    if args.overlays:
        (out / "overlays").mkdir(exist_ok=True)
        for layout, row in list(zip(layouts, rows))[: args.overlays]:
            render_overlay(layout, row.pred, row.gt, out / "overlays" / f"{_safe(layout.id)}.ppm")
    _print_table(rows)
    return EXIT_OK


def cmd_report(args, config) -> int:
    if args.data is None:
        raise UsageError("--data must point to a metrics.csv written by eval")
    try:
        rows = read_rows_csv(args.data)
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"cannot read {args.data}: {exc}") from exc
    _write_reports(rows, _out_dir(args), args.area_bins)
    _print_table(rows)
    return EXIT_OK


def cmd_prompt(args, config) -> int:
    layouts = _load(args.data)
    docs = [serialize_prompt(layout, args.sort) for layout in layouts]
    if args.out is None:
        for doc in docs:
            sys.stdout.write(doc.records_json())
        return EXIT_OK
    out = _out_dir(args)
    (out / "prompt_images").mkdir(exist_ok=True)
    with open(out / "prompts.jsonl", "w", encoding="utf-8") as fh:
        for doc in docs:
            image = out / "prompt_images" / f"{_safe(doc.layout_id)}.ppm"
            doc.image.save(image)
            fh.write(json.dumps({"layout_id": doc.layout_id, "records": doc.records_json(),
                                 "image": image.relative_to(out).as_posix()}) + "\n")
    print(f"wrote {len(docs)} prompts to {out / 'prompts.jsonl'}")
    return EXIT_OK


def cmd_query(args, config) -> int:
    if args.predictor == "transformer":
        raise UsageError("query sends prompts to an external or mock predictor")
    layouts = _load(args.data)
    out = _out_dir(args)
    responses = []
    with TranscriptLog(out / "transcripts.jsonl") as transcript:
        predictor = make_predictor(args, transcript)
        for layout in layouts:
            responses.append(predictor(layout))
    print(json.dumps(tally_invalid(responses).as_dict()))
    return EXIT_OK


def cmd_render(args, config) -> int:
    layouts = _load(args.data)
    out = _out_dir(args) / "overlays"
    out.mkdir(exist_ok=True)
    preds: list[BBox | None] = [None] * len(layouts)
    if args.model or args.predictor != "transformer":
        rows = evaluate(make_predictor(args, None), layouts)
        preds = [r.pred for r in rows]
    for layout, pred in zip(layouts, preds):
        render_overlay(layout, pred, None, out / f"{_safe(layout.id)}.ppm")
    print(f"wrote {len(layouts)} overlays to {out}")
    return EXIT_OK


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def _bbox_arg(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected four comma-separated numbers") from None
    if len(values) != 4:
        raise argparse.ArgumentTypeError("expected four comma-separated numbers")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--data", help="dataset (JSON Lines); for report, a metrics.csv")
    common.add_argument("--model", help="model checkpoint (.npz)")
    common.add_argument("--config", help="JSON config with optional synth/model/train sections")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--predictor", choices=("transformer", "external", "mock"), default="transformer")
    common.add_argument("--multi-image", action="store_true", help="embed every element's raster")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="textplace", description="Text box placement on graphic layouts.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--container", action="store_true", help="text-container benchmark layouts")
    p.set_defaults(func=cmd_gen, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train the placement model")
    p.add_argument("--val", help="validation dataset; default holds out 10%% of --data")
    p.set_defaults(func=cmd_train, needs_out=True)

    for name, func, help_text in (("eval", cmd_eval, "evaluate a predictor"),
                                  ("query", cmd_query, "query an external or mock predictor"),
                                  ("render", cmd_render, "render layouts with box overlays")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--mock-bbox", type=_bbox_arg, default=(0.25, 0.25, 0.5, 0.5))
        p.add_argument("--mock-prose", action="store_true", help="mock replies without JSON")
        p.add_argument("--retries", type=int, default=3)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--overlays", type=int, default=8, help="overlays to write (eval)")
        p.add_argument("--area-bins", type=int, default=5)
        p.set_defaults(func=func, needs_out=True)

    p = sub.add_parser("report", parents=[common], help="tables and buckets from metrics.csv")
    p.add_argument("--area-bins", type=int, default=5)
    p.set_defaults(func=cmd_report, needs_out=True)

    p = sub.add_parser("prompt", parents=[common], help="emit serialized prompts")
    p.add_argument("--sort", choices=("reading", "column", "input"), default="reading")
    p.set_defaults(func=cmd_prompt, needs_out=False)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.needs_out and args.out is None:
            raise UsageError(f"{args.command}: --out is required")
        return args.func(args, load_config(args.config))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PredictorError as exc:
        print(f"predictor error: {exc}", file=sys.stderr)
        return EXIT_PREDICTOR
    except (DatasetError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

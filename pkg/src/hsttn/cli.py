"""Command-line front end: synthesize data, train, predict, evaluate, plot.

Exit codes: 0 success, 2 usage/configuration problems, 3 file/parse
problems, 4 numerical failures. Log verbosity comes from the HSTTN_LOG
environment variable (debug, info, warning, quiet).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from xml.etree import ElementTree as ET

import numpy as np

from . import checkpoint as ckpt_io
from .data import (
    RecordSet,
    SampleWindow,
    Schema,
    SplitBounds,
    apply_zscore,
    default_invalid_rules,
    fit_zscore,
    load_records,
    make_windows,
    mark_invalid,
    synth_generate,
    write_csv,
)
from .errors import (
    ConfigError,
    ContractError,
    DatasetError,
    EvaluationError,
    HsttnError,
    IngestError,
    ShapeError,
    TrainingError,
)
from .evaluation import evaluate_model, predict_window
from .kv import read_kv, write_kv
from .model import HSTTN, ModelConfig
from .training import TrainConfig, train

log = logging.getLogger("hsttn")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


class UsageError(HsttnError):
    pass


def _setup_logging() -> None:
    level_name = os.environ.get("HSTTN_LOG", "warning").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO,
              "warning": logging.WARNING, "quiet": logging.CRITICAL}
    if level_name not in levels:
        raise UsageError(f"HSTTN_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(level=levels[level_name], format="%(levelname)s %(name)s: %(message)s")


@dataclass
class RunConfig:
    """Everything one training run needs, parsed from a flat config file."""

    data: Path
    schema: Path
    train_end: int
    val_end: int
    history_len: int = 144
    horizon_len: int = 144
    d_model: int = 16
    n_heads: int = 2
    pool_factors: tuple[int, ...] = (3, 2)
    layers_encoder: int = 2
    layers_decoder: int = 1
    dropout: float = 0.1
    use_skip: bool = True
    use_temporal_branch: bool = True
    use_spatial_branch: bool = True
    use_cfb: bool = True
    lr: float = 1e-4
    lr_decay: float = 0.7
    batch_size: int = 4
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    train_stride: int = 1
    val_stride: int = 1
    eval_stride: int = 1
    out_dir: Path = field(default_factory=lambda: Path("runs/out"))

    @classmethod
    def load(cls, path) -> "RunConfig":
        kv = read_kv(path)
        base = Path(path).parent

        def req(key: str) -> str:
            if key not in kv:
                raise ConfigError(f"{path}: missing required key {key!r}")
            return kv[key]

        def geti(key: str, default: int) -> int:
            try:
                return int(kv.get(key, default))
            except ValueError:
                raise ConfigError(f"{path}: key {key!r} must be an integer") from None

        def getf(key: str, default: float) -> float:
            try:
                return float(kv.get(key, default))
            except ValueError:
                raise ConfigError(f"{path}: key {key!r} must be a number") from None

        def getb(key: str, default: bool) -> bool:
            raw = kv.get(key, str(default)).strip().lower()
            if raw in ("true", "1", "yes", "on"):
                return True
            if raw in ("false", "0", "no", "off"):
                return False
            raise ConfigError(f"{path}: key {key!r} must be a boolean, got {raw!r}")

        factors_raw = kv.get("pool_factors", "3,2").strip()
        if factors_raw in ("", "none"):
            factors: tuple[int, ...] = ()
        else:
            try:
                factors = tuple(int(p) for p in factors_raw.split(","))
            except ValueError:
                raise ConfigError(
                    f"{path}: pool_factors must be comma-separated integers"
                ) from None

        return cls(
            data=(base / req("data")).resolve(),
            schema=(base / req("schema")).resolve(),
            train_end=geti("train_end", 0),
            val_end=geti("val_end", 0),
            history_len=geti("history_len", 144),
            horizon_len=geti("horizon_len", 144),
            d_model=geti("d_model", 16),
            n_heads=geti("n_heads", 2),
            pool_factors=factors,
            layers_encoder=geti("layers_encoder", 2),
            layers_decoder=geti("layers_decoder", 1),
            dropout=getf("dropout", 0.1),
            use_skip=getb("use_skip", True),
            use_temporal_branch=getb("use_temporal_branch", True),
            use_spatial_branch=getb("use_spatial_branch", True),
            use_cfb=getb("use_cfb", True),
            lr=getf("lr", 1e-4),
            lr_decay=getf("lr_decay", 0.7),
            batch_size=geti("batch_size", 4),
            max_epochs=geti("max_epochs", 50),
            patience=geti("patience", 5),
            seed=geti("seed", 0),
            train_stride=geti("train_stride", 1),
            val_stride=geti("val_stride", 1),
            eval_stride=geti("eval_stride", 1),
            out_dir=base / kv.get("out_dir", "runs/out"),
        )

    def model_config(self, n_turbines: int, n_channels: int) -> ModelConfig:
        return ModelConfig(
            n_turbines=n_turbines,
            history_len=self.history_len,
            horizon_len=self.horizon_len,
            n_channels=n_channels,
            d_model=self.d_model,
            n_heads=self.n_heads,
            pool_factors=self.pool_factors,
            layers_encoder=self.layers_encoder,
            layers_decoder=self.layers_decoder,
            dropout_rate=self.dropout,
            use_skip=self.use_skip,
            use_temporal_branch=self.use_temporal_branch,
            use_spatial_branch=self.use_spatial_branch,
            use_cfb=self.use_cfb,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            initial_lr=self.lr,
            lr_decay=self.lr_decay,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
        )


def _load_and_prepare(data_path, schema_path) -> RecordSet:
    if not Path(schema_path).exists():
        raise IngestError(f"schema file not found: {schema_path}")
    if not Path(data_path).exists():
        raise IngestError(f"data file not found: {data_path}")
    schema = Schema.load(schema_path)
    rs = load_records(data_path, schema)
    return mark_invalid(rs, default_invalid_rules(schema))


def cmd_synth(args) -> int:
    if args.timestamps < 1 or args.turbines < 1:
        raise UsageError("--timestamps and --turbines must be positive")
    if args.channels < 2:
        raise UsageError("--channels must be at least 2 (one feature plus the target)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rs = synth_generate(args.turbines, args.timestamps, args.channels, args.seed,
                        noise_scale=args.noise)
    write_csv(rs, out / "synthetic.csv")
    rs.schema.save(out / "synthetic.schema")
    log.info("wrote %s and %s", out / "synthetic.csv", out / "synthetic.schema")
    print(f"synthetic farm: {args.turbines} turbines x {args.timestamps} timestamps "
          f"x {args.channels} channels -> {out / 'synthetic.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.out:
        cfg.out_dir = Path(args.out)
    if args.seed is not None:
        cfg.seed = args.seed
    # full validation before any expensive work; dataset-derived dims are
    # checked again once the data is loaded
    cfg.train_config().validate()
    cfg.model_config(n_turbines=1, n_channels=1).validate()
    rs = _load_and_prepare(cfg.data, cfg.schema)
    model_cfg = cfg.model_config(rs.n_turbines, rs.n_channels)
    model_cfg.validate()
    splits = SplitBounds(cfg.train_end, cfg.val_end).ranges(rs.n_timestamps)

    stats = fit_zscore(rs, splits["train"])
    normed = apply_zscore(rs, stats)
    h, f = cfg.history_len, cfg.horizon_len
    train_windows = make_windows(normed, h, f, cfg.train_stride, *splits["train"])
    val_windows = make_windows(normed, h, f, cfg.val_stride, *splits["val"])

    model = HSTTN(model_cfg, seed=cfg.seed)
    best, records = train(model, train_windows, val_windows, cfg.train_config(),
                          stats, schema_dict=rs.schema.to_dict())

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_io.save_checkpoint(out / "checkpoint.bin", best)
    with (out / "train_log.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])
    print(f"best validation loss {best.val_loss!r} at epoch {best.epoch}; "
          f"checkpoint -> {out / 'checkpoint.bin'}")
    return EXIT_OK


def _restore(checkpoint_path, data_path, schema_path):
    if not Path(checkpoint_path).exists():
        raise IngestError(f"checkpoint not found: {checkpoint_path}")
    ckpt = ckpt_io.load_checkpoint(checkpoint_path)
    rs = _load_and_prepare(data_path, schema_path)
    if ckpt.schema_dict and tuple(ckpt.schema_dict.get("channels", "").split(",")) \
            != rs.schema.channels:
        raise UsageError(
            "dataset channels do not match the channels this checkpoint was trained on"
        )
    if rs.n_turbines != ckpt.model_config.n_turbines:
        raise UsageError(
            f"dataset has {rs.n_turbines} turbines but the checkpoint was trained "
            f"on {ckpt.model_config.n_turbines}"
        )
    model = ckpt_io.model_from_checkpoint(ckpt)
    normed = apply_zscore(rs, ckpt.norm_stats)
    return ckpt, rs, normed, model


def cmd_predict(args) -> int:
    ckpt, rs, normed, model = _restore(args.checkpoint, args.data, args.schema)
    h = ckpt.model_config.history_len
    f = ckpt.model_config.horizon_len
    origin = args.origin
    if origin < h:
        raise UsageError(
            f"origin {origin} does not leave {h} history steps before it"
        )
    if origin > rs.n_timestamps:
        raise UsageError(f"origin {origin} is beyond the dataset ({rs.n_timestamps})")
    window_list = make_windows(normed, h, f, stride=1, start=origin - h,
                               end=min(origin + f, rs.n_timestamps)) \
        if origin + f <= rs.n_timestamps else None
    target = rs.target_index
    if window_list is not None:
        window = window_list[0]
    else:
        # horizon extends past the data; build the history-only window
        window = SampleWindow(
            history=normed.values[:, origin - h:origin, :],
            future_target=np.zeros((rs.n_turbines, f, 1)),
            future_validity=np.zeros((rs.n_turbines, f), dtype=bool),
            origin=origin,
        )
    pred = predict_window(model, window, ckpt.norm_stats, target)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "forecast.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["turbine", "step", "predicted_power"])
        for n in range(pred.shape[0]):
            for k in range(pred.shape[1]):
                writer.writerow([n, k, repr(float(pred[n, k]))])
    wrote_truth = False
    if window_list is not None:
        truth = ckpt.norm_stats.invert(window.future_target[:, :, 0], target)
        with (out / "truth.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["turbine", "step", "actual_power", "valid"])
            for n in range(truth.shape[0]):
                for k in range(truth.shape[1]):
                    writer.writerow([n, k, repr(float(truth[n, k])),
                                     int(window.future_validity[n, k])])
        wrote_truth = True
    print(f"forecast for {pred.shape[0]} turbines x {pred.shape[1]} steps "
          f"-> {out / 'forecast.csv'}" + (" (+ truth.csv)" if wrote_truth else ""))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt, rs, normed, model = _restore(args.checkpoint, args.data, args.schema)
    h = ckpt.model_config.history_len
    f = ckpt.model_config.horizon_len
    start = args.start if args.start is not None else 0
    end = args.end if args.end is not None else rs.n_timestamps
    try:
        windows = make_windows(normed, h, f, args.stride, start, end)
    except DatasetError as exc:
        raise EvaluationError(f"empty evaluation split: {exc}") from exc
    report = evaluate_model(model, windows, ckpt.norm_stats, rs.target_index,
                            megawatts=args.mw)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.csv").open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(report.to_csv_rows())
    write_kv(out / "report.kv", report.to_kv(), header="farm evaluation report")
    print(f"MAE {report.mae!r} {report.unit}, RMSE {report.rmse!r} {report.unit} "
          f"over {report.n_windows} windows -> {out / 'report.kv'}")
    return EXIT_OK


def _read_grid(path) -> dict[tuple[int, int], float]:
    grid: dict[tuple[int, int], float] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3:
            raise IngestError(f"{path}: expected a (turbine, step, value) table")
        for cells in reader:
            if not cells:
                continue
            grid[(int(cells[0]), int(cells[1]))] = float(cells[2])
    if not grid:
        raise IngestError(f"{path}: no rows")
    return grid


def _polyline(points: list[tuple[float, float]], color: str) -> ET.Element:
    return ET.Element("polyline", {
        "fill": "none",
        "stroke": color,
        "stroke-width": "1.5",
        "points": " ".join(f"{x:.2f},{y:.2f}" for x, y in points),
    })


def cmd_plot(args) -> int:
    forecast = _read_grid(args.forecast)
    truth = _read_grid(args.truth)
    if set(forecast) != set(truth):
        raise UsageError("forecast and truth files cover different (turbine, step) grids")
    turbines = sorted({t for t, _ in forecast})
    steps = sorted({k for _, k in forecast})
    if args.turbine not in turbines:
        raise UsageError(f"--turbine {args.turbine} not in file (has {turbines})")

    pred = [forecast[(args.turbine, k)] for k in steps]
    actual = [truth[(args.turbine, k)] for k in steps]
    width, height, margin = 640, 360, 40
    lo = min(min(pred), min(actual))
    hi = max(max(pred), max(actual))
    span = (hi - lo) or 1.0

    def to_xy(series):
        pts = []
        for i, v in enumerate(series):
            x = margin + (width - 2 * margin) * (i / max(len(series) - 1, 1))
            y = height - margin - (height - 2 * margin) * ((v - lo) / span)
            pts.append((x, y))
        return pts

    svg = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(width), "height": str(height),
        "viewBox": f"0 0 {width} {height}",
    })
    ET.SubElement(svg, "rect", {"x": "0", "y": "0", "width": str(width),
                                "height": str(height), "fill": "white"})
    axis = ET.SubElement(svg, "g", {"stroke": "black", "stroke-width": "1"})
    ET.SubElement(axis, "line", {"x1": str(margin), "y1": str(height - margin),
                                 "x2": str(width - margin), "y2": str(height - margin)})
    ET.SubElement(axis, "line", {"x1": str(margin), "y1": str(margin),
                                 "x2": str(margin), "y2": str(height - margin)})
    svg.append(_polyline(to_xy(actual), "#1f77b4"))
    svg.append(_polyline(to_xy(pred), "#d62728"))
    label = ET.SubElement(svg, "text", {"x": str(margin), "y": str(margin - 10),
                                        "font-size": "12"})
    label.text = (f"turbine {args.turbine}: actual (blue) vs predicted (red), "
                  f"{len(steps)} steps")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ET.ElementTree(svg).write(out, encoding="unicode", xml_declaration=True)
    print(f"plot -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsttn",
        description="Train and evaluate the hierarchical spatial-temporal wind "
                    "power forecaster.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a deterministic synthetic farm")
    p.add_argument("--out", required=True)
    p.add_argument("--turbines", type=int, default=4)
    p.add_argument("--timestamps", type=int, default=2000)
    p.add_argument("--channels", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train from a run config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's out_dir")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("predict", help="forecast one horizon from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--origin", type=int, required=True,
                   help="timestamp index of the first forecast step")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("evaluate", help="masked MAE/RMSE over a window range")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--start", type=int, default=None)
    p.add_argument("--end", type=int, default=None)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--mw", action="store_true", help="report megawatts instead of kW")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("plot", help="SVG overlay of predicted vs actual power")
    p.add_argument("--forecast", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--turbine", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError, ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, EvaluationError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

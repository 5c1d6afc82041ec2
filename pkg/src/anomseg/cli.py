"""Command-line entry point.

Subcommands: gen-data, train, eval, map, analyze-metrics. All flags are
long-form. Exit codes: 0 success, 1 usage error, 2 data/integrity error,
3 numeric failure (non-finite loss).

Every run is driven by a JSON config with defaults for every field; the
resolved config is echoed into the output directory. Randomness flows from
the single config seed through named sub-streams ("init" for decoder weights,
"shuffle" for batch order; the frozen backbone is seeded with the raw seed),
so identical config+seed runs produce byte-identical logs and checkpoints.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio, metrics, synth
from .anomaly import compute_anomaly_map, export_anomaly_map
from .autodiff import NumericError, ShapeError, Tensor, no_grad
from .decoder import DecoderConfig, MultiLevelDecoder
from .frontend import GaussianKernel, TinyBackbone, filter_and_concat
from .inits import substream
from .optim import AdamW
from .synth import CorpusSpec, IntegrityError
from .train import (DataError, build_feature_cache, evaluate_model,
                    guard_train_split, train_model)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class OptimizerSettings:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ScheduleSettings:
    decay_epochs: list[int] | None = None  # default: every epochs/2.5
    decay_factor: float = 0.1


@dataclass
class DecoderSettings:
    embed_dim: int = 32
    heads: int = 4
    ffn_dim: int = 256
    channel_attention: bool = False
    local_refine: bool = True
    reduction_ratio: int = 16
    spatial_kernel: int = 7


@dataclass
class BackboneSettings:
    channels: list[int] = field(default_factory=lambda: [8, 16, 24, 32])


@dataclass
class RunConfig:
    corpus_dir: str = "corpus"
    out_dir: str = "runs/default"
    seed: int = 0
    epochs: int = 200
    batch_size: int = 16
    checkpoint_path: str | None = None  # default: <out_dir>/model.ckpt
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    decoder: DecoderSettings = field(default_factory=DecoderSettings)
    backbone: BackboneSettings = field(default_factory=BackboneSettings)

    def resolved_decay_epochs(self) -> list[int]:
        if self.schedule.decay_epochs is not None:
            return list(self.schedule.decay_epochs)
        step = self.epochs / 2.5
        return [e for e in (int(step), int(2 * step)) if 0 < e < self.epochs]

    def resolved_checkpoint(self) -> Path:
        if self.checkpoint_path is not None:
            return Path(self.checkpoint_path)
        return Path(self.out_dir) / "model.ckpt"

    def to_json(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["schedule"]["decay_epochs"] = self.resolved_decay_epochs()
        doc["checkpoint_path"] = str(self.resolved_checkpoint())
        return doc


def _build_section(cls, doc: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys under {path}: {sorted(unknown)}")
    return doc


def load_run_config(path) -> RunConfig:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValueError("run config must be a JSON object")
    _build_section(RunConfig, doc, "<root>")
    cfg = RunConfig()
    for name, sub_cls in (("optimizer", OptimizerSettings), ("schedule", ScheduleSettings),
                          ("decoder", DecoderSettings), ("backbone", BackboneSettings)):
        if name in doc:
            section = _build_section(sub_cls, doc.pop(name), name)
            setattr(cfg, name, sub_cls(**section))
    for key, value in doc.items():
        setattr(cfg, key, value)
    return cfg


def _decoder_config(cfg: RunConfig, image_size: int) -> DecoderConfig:
    d = cfg.decoder
    return DecoderConfig.for_corpus(
        image_size, tuple(cfg.backbone.channels), embed_dim=d.embed_dim, heads=d.heads,
        ffn_dim=d.ffn_dim, channel_attention=d.channel_attention,
        local_refine=d.local_refine, reduction_ratio=d.reduction_ratio,
        spatial_kernel=d.spatial_kernel)


def _build_model_and_backbone(cfg: RunConfig, image_size: int):
    backbone = TinyBackbone(tuple(cfg.backbone.channels), seed=cfg.seed)
    model = MultiLevelDecoder(_decoder_config(cfg, image_size), substream(cfg.seed, "init"))
    return model, backbone


def _echo_config(cfg: RunConfig) -> None:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = CorpusSpec()
    if args.spec is not None:
        spec = CorpusSpec.from_json(json.loads(Path(args.spec).read_text()))
    manifest = synth.generate(spec, args.out)
    print(f"{'category':16s} {'target AR':>10s} {'measured AR':>12s}")
    for entry in manifest["categories"]:
        print(f"{entry['name']:16s} {entry['target_ar']:10.4f} {entry['measured_ar']:12.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    _echo_config(cfg)
    samples = list(synth.load(cfg.corpus_dir, split="train"))
    guard_train_split(samples)
    manifest = synth.read_manifest(cfg.corpus_dir)
    image_size = manifest["image_size"]

    model, backbone = _build_model_and_backbone(cfg, image_size)
    kernel = GaussianKernel()
    cache = build_feature_cache(samples, backbone, kernel, cfg.batch_size)
    opt = AdamW(model.parameters(), lr=cfg.optimizer.lr,
                betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
                eps=cfg.optimizer.eps, weight_decay=cfg.optimizer.weight_decay)

    def progress(stats):
        if stats.epoch == 1 or stats.epoch % 10 == 0:
            print(f"epoch {stats.epoch:4d}  cosine {stats.cosine:.5f}  "
                  f"mse {stats.mse:.5f}  total {stats.total:.5f}", flush=True)

    out = Path(cfg.out_dir)
    train_model(model, cache, epochs=cfg.epochs, batch_size=cfg.batch_size,
                optimizer=opt, decay_epochs=cfg.resolved_decay_epochs(),
                decay_factor=cfg.schedule.decay_factor,
                shuffle_gen=substream(cfg.seed, "shuffle"),
                log_path=out / "loss_log.csv", milestone_dir=out, progress=progress)
    fileio.save_checkpoint(cfg.resolved_checkpoint(), model.state_dict())
    print(f"checkpoint written to {cfg.resolved_checkpoint()}")
    return EXIT_OK


def _parse_levels(raw: str | None):
    if raw is None:
        return None
    levels = [int(tok) for tok in raw.split(",") if tok.strip()]
    if not levels:
        raise UsageError("--levels must list at least one level")
    return levels


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    levels = _parse_levels(args.levels)
    samples = list(synth.load(cfg.corpus_dir, split="test"))
    manifest = synth.read_manifest(cfg.corpus_dir)
    model, backbone = _build_model_and_backbone(cfg, manifest["image_size"])
    model.load_state_dict(fileio.load_checkpoint(args.checkpoint))

    out = Path(args.out if args.out else Path(cfg.out_dir) / "eval")
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate_model(model, backbone, GaussianKernel(), samples, levels=levels,
                            batch_size=cfg.batch_size,
                            heatmap_dir=out / "heatmaps" if args.heatmaps else None,
                            curve_dir=out / "curves")
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=1) + "\n")
    mean = report.mean()
    for name, r in report.categories.items():
        print(f"{name:16s} auroc {r.auroc:.4f}  pAP {r.pap:.4f}  "
              f"dsc {r.dsc:.4f}  AR {r.ar:.4f}")
    print(f"{'mean':16s} auroc {mean['auroc']:.4f}  pAP {mean['pap']:.4f}  "
          f"dsc {mean['dsc']:.4f}  AR {mean['ar']:.4f}")
    return EXIT_OK


def cmd_map(args) -> int:
    cfg = load_run_config(args.config)
    image = Tensor(fileio.read_ppm(args.image))
    model, backbone = _build_model_and_backbone(cfg, image.shape[-1])
    model.load_state_dict(fileio.load_checkpoint(args.checkpoint))
    with no_grad():
        filtered, merged = filter_and_concat(
            backbone.extract(Tensor(image.data[None])), GaussianKernel())
        recon = model.decode(merged.levels)
        h, w = image.shape[-2:]
        amap = compute_anomaly_map([Tensor(r.data[0]) for r in recon],
                                   [Tensor(t.data[0]) for t in filtered.levels],
                                   h, w, image_id=Path(args.image).stem,
                                   levels=_parse_levels(args.levels))
    export_anomaly_map(amap, args.out, Path(args.image).stem)
    print(f"anomaly map written under {args.out} (max score {amap.image_score:.4f})")
    return EXIT_OK


def cmd_analyze_metrics(args) -> int:
    result = metrics.inflation_demo(args.ar, args.dilation, args.seed, size=args.size)
    gap = result.auroc - result.pap
    print(f"AUROC {result.auroc:.6f}")
    print(f"pAP   {result.pap:.6f}")
    print(f"DSC   {result.dsc:.6f} (threshold {result.threshold:.6f})")
    print(f"AUROC-pAP gap {gap:.6f}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "curve.csv").write_text("\n".join(result.curve.csv_rows()) + "\n")
        (out / "summary.json").write_text(json.dumps(
            {"ar": args.ar, "dilation": args.dilation, "seed": args.seed,
             "size": args.size, "auroc": result.auroc, "pap": result.pap,
             "dsc": result.dsc, "threshold": result.threshold, "gap": gap},
            indent=1) + "\n")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="anomseg",
                     description="Unified anomaly segmentation at desk scale: "
                                 "synthetic corpus, reconstruction training, "
                                 "pixel metrics, and metric-inflation analysis.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    p.add_argument("--spec", default=None, help="corpus spec JSON (defaults apply)")
    p.add_argument("--out", required=True, help="corpus output directory")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train the unified model on a corpus")
    p.add_argument("--config", required=True, help="run config JSON")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--levels", default=None,
                   help="comma-separated 1-based levels for the map product")
    p.add_argument("--heatmaps", action="store_true", help="export per-image maps")
    p.add_argument("--out", default=None, help="report directory (default <out_dir>/eval)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("map", help="export the anomaly map for one image")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--levels", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_map)

    p = sub.add_parser("analyze-metrics", help="AUROC-inflation demonstration")
    p.add_argument("--ar", type=float, default=0.01)
    p.add_argument("--dilation", type=int, default=6)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", default=None, help="directory for curve CSV + summary")
    p.set_defaults(fn=cmd_analyze_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, DataError, fileio.FormatError, FileNotFoundError,
            NotADirectoryError, ShapeError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data/input error,
4 runtime error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import export, metrics
from .config import RunConfig, config_from_dict, dump_config, load_config
from .datasets import (
    MVTEC_CATEGORIES,
    load_labeled_dataset,
    load_mvtec_category,
    make_one_class_split,
    preprocess,
    split_holdout,
)
from .decoder import build_decoder
from .encoder import build_encoder
from .errors import ConfigError, DataError, HFRError, WeightsUnavailableError
from .fixture import make_fixture
from .residual import max_map_value
from .trainer import (
    check_compatible,
    dataset_fingerprint,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
    write_loss_csv,
    write_metadata,
)

logger = logging.getLogger("hfrae")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _targets(cfg: RunConfig) -> List[str]:
    if cfg.data.kind == "mvtec":
        if cfg.data.categories:
            return list(cfg.data.categories)
        root = Path(cfg.data.root)
        found = [c for c in MVTEC_CATEGORIES if (root / c).is_dir()]
        if not found:
            raise DataError(f"no MVTec AD categories found under {root}; set data.categories")
        return found
    return [str(c) for c in cfg.data.normal_classes]


def _load_target(cfg: RunConfig, target: str, labeled_cache: dict):
    """Return ``(train_records, test_records)`` for one category / normal class."""
    res = cfg.data.resolution
    if cfg.data.kind == "mvtec":
        return (
            load_mvtec_category(cfg.data.root, target, "train", res),
            load_mvtec_category(cfg.data.root, target, "test", res),
        )
    if "ds" not in labeled_cache:
        labeled_cache["ds"] = load_labeled_dataset(cfg.data.kind, cfg.data.root)
    split = make_one_class_split(
        labeled_cache["ds"], int(target), res,
        max_train=cfg.data.max_train, max_test=cfg.data.max_test, seed=cfg.train_config().seed,
    )
    return split.train, split.test


def _run_dir(out: Path) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    path, i = out / stamp, 1
    while path.exists():
        path, i = out / f"{stamp}-{i}", i + 1
    path.mkdir(parents=True)
    return path


def _apply_flags(cfg_path, args) -> RunConfig:
    overrides = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "device", None):
        overrides.append(f"train.device={args.device}")
    if getattr(args, "out", None):
        overrides.append(f"inference.output_dir={args.out}")
    return load_config(cfg_path, overrides)


def _train_target(cfg: RunConfig, target: str, encoder, run_dir: Path, cache: dict) -> Path:
    tcfg = cfg.train_config()
    train_records, _ = _load_target(cfg, target, cache)
    train_records, holdout = split_holdout(train_records, tcfg.holdout_fraction, tcfg.seed)
    res = cfg.data.resolution
    decoder = build_decoder(cfg.decoder_spec(encoder.channels), encoder.output_shapes(res, res), seed=cfg.decoder.seed)
    ckpt = train(encoder, decoder, train_records, tcfg, holdout_data=holdout, run_config=cfg.to_dict())
    target_dir = run_dir / target
    path = save_checkpoint(ckpt, target_dir / "checkpoint.pt")
    write_loss_csv(ckpt.loss_history, target_dir / "loss.csv")
    write_metadata(
        target_dir / "metadata.json",
        target=target,
        seed=tcfg.seed,
        config=cfg.to_dict(),
        backbone=cfg.backbone.architecture,
        backbone_pretrained=encoder.spec.is_pretrained,
        encoder_hash=ckpt.encoder_hash,
        dataset_fingerprint=dataset_fingerprint(train_records),
        n_train=len(train_records),
        n_holdout=len(holdout),
        epochs=ckpt.epoch,
        final_loss=ckpt.final_loss,
        resolution=res,
        torch_version=torch.__version__,
    )
    logger.info("%s: checkpoint %s (final loss %.6f)", target, path, ckpt.final_loss)
    return path


def cmd_train(args) -> int:
    cfg = _apply_flags(args.config, args)
    encoder = build_encoder(cfg.backbone_spec(), allow_download=cfg.backbone.allow_download)
    run_dir = _run_dir(Path(cfg.inference.output_dir))
    dump_config(cfg, run_dir / "config.yaml")
    cache = {}
    for target in _targets(cfg):
        print(_train_target(cfg, target, encoder, run_dir, cache))
    return EXIT_OK


def _checkpoints(path: Path) -> List[Tuple[str, Path]]:
    if path.is_file():
        return [(path.parent.name, path)]
    found = sorted(path.glob("*/checkpoint.pt"))
    if not found:
        raise DataError(f"no checkpoint.pt under {path}")
    return [(p.parent.name, p) for p in found]


def _evaluate_all(cfg: RunConfig, pairs, out_dir: Path, encoder=None) -> List[metrics.EvalReport]:
    encoder = encoder or build_encoder(cfg.backbone_spec(), allow_download=cfg.backbone.allow_download)
    icfg = cfg.inference_config()
    norm = cfg.train_config().normalization
    reports, cache = [], {}
    for target, ckpt_path in pairs:
        ckpt = load_checkpoint(ckpt_path)
        check_compatible(ckpt, encoder)
        _, test_records = _load_target(cfg, target, cache)
        report, outputs = evaluate(
            encoder, ckpt.restore_decoder(), test_records, icfg,
            category=target, normalization=norm, return_outputs=True,
        )
        reports.append(report)
        export.write_scores_csv(
            ((r.source_path, s, r.label) for r, s in zip(test_records, outputs["scores"])),
            out_dir / target / "scores.csv",
        )
        roc = metrics.roc_curve(outputs["scores"], outputs["labels"])
        metrics.write_curve_csv(roc.fpr, roc.tpr, out_dir / target / "roc.csv")
        if report.aupro is not None:
            pro = metrics.aupro(outputs["maps"], [r.mask for r in test_records], fpr_cap=icfg.fpr_cap)
            metrics.write_curve_csv(pro.fpr, pro.mean_region_overlap, out_dir / target / "pro.csv",
                                    header=("fpr", "mean_region_overlap"))
        if report.untrained:
            print(f"warning: checkpoint for {target} is untrained", file=sys.stderr)
    metrics.write_report_csv(reports, out_dir / "report.csv")
    print(metrics.format_table(reports))
    return reports


def cmd_eval(args) -> int:
    cfg = _apply_flags(args.config, args)
    ckpt_root = Path(args.checkpoint)
    out_dir = Path(args.out) if args.out else (ckpt_root if ckpt_root.is_dir() else ckpt_root.parent)
    _evaluate_all(cfg, _checkpoints(ckpt_root), out_dir)
    print(out_dir / "report.csv")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    cfg = _apply_flags(args.config, args)
    encoder = build_encoder(cfg.backbone_spec(), allow_download=cfg.backbone.allow_download)
    run_dir = _run_dir(Path(cfg.inference.output_dir))
    dump_config(cfg, run_dir / "config.yaml")
    cache, pairs = {}, []
    for target in _targets(cfg):
        pairs.append((target, _train_target(cfg, target, encoder, run_dir, cache)))
    _evaluate_all(cfg, pairs, run_dir, encoder)
    print(run_dir / "report.csv")
    return EXIT_OK


def _collect_images(inputs: Sequence[str]) -> List[Path]:
    from .datasets import IMAGE_SUFFIXES

    paths = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(q for q in p.rglob("*") if q.suffix.lower() in IMAGE_SUFFIXES))
        else:
            paths.append(p)
    return paths


def cmd_infer(args, overlay: bool = False) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = load_config(args.config) if args.config else config_from_dict(ckpt.config)
    encoder = build_encoder(cfg.backbone_spec(), allow_download=cfg.backbone.allow_download)
    check_compatible(ckpt, encoder)
    decoder = ckpt.restore_decoder()
    icfg = cfg.inference_config()
    res = cfg.data.resolution
    scale = max_map_value(ckpt.encoder_shapes, icfg.level_scaling)
    out = Path(args.out)
    rows, failures = [], 0
    paths = _collect_images(args.inputs)
    if not paths:
        raise DataError("no input images")
    for p in paths:
        try:
            image = preprocess(p, res)
        except DataError as exc:
            failures += 1
            print(f"error: {exc}", file=sys.stderr)
            continue
        maps, scores = predict(encoder, decoder, torch.from_numpy(image)[None], icfg,
                               normalization=cfg.train_config().normalization)
        amap = maps[0]
        stem = p.stem if len(paths) == len({q.stem for q in paths}) else "_".join(p.parts[-2:]).rsplit(".", 1)[0]
        export.save_map_png16(amap, out / "maps" / f"{stem}.png", scale)
        np.save(out / "maps" / f"{stem}.npy", amap)
        if overlay or args.overlay:
            export.save_overlay(image, amap, out / "overlays" / f"{stem}.png")
        rows.append((str(p), float(scores[0]), ""))
    export.write_scores_csv(rows, out / "scores.csv")
    print(out / "scores.csv")
    return EXIT_RUNTIME if failures == len(paths) else EXIT_OK


def cmd_visualize(args) -> int:
    return cmd_infer(args, overlay=True)


def cmd_make_fixture(args) -> int:
    path = make_fixture(
        args.out, seed=args.seed, category=args.category, n_train=args.n_train,
        n_good=args.n_good, n_defect=args.n_defect, image_size=args.image_size,
    )
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfrae", description="Hierarchical feature reconstruction anomaly detection")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML run config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int)
        p.add_argument("--device")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a decoder per category / normal class")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints and write report.csv")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("benchmark", help="train and evaluate every configured target")
    common(p)
    p.set_defaults(func=cmd_benchmark)

    for name, func, helptext in (
        ("infer", cmd_infer, "anomaly maps and scores for images"),
        ("visualize", cmd_visualize, "like infer, always writing heat-map overlays"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", help="defaults to the config stored in the checkpoint")
        p.add_argument("--out", required=True)
        p.add_argument("--overlay", action="store_true", help="also write colour overlays")
        p.add_argument("inputs", nargs="+", help="image files or directories")
        p.set_defaults(func=func)

    p = sub.add_parser("make-fixture", help="write the seeded synthetic MVTec-layout dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--category", default="synthetic")
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-good", type=int, default=20)
    p.add_argument("--n-defect", type=int, default=20)
    p.add_argument("--image-size", type=int, default=128)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, WeightsUnavailableError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (HFRError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

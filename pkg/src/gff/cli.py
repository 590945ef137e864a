"""``gff`` command line: gen | train | eval | sweep | cam | features.

Every command resolves its configuration (file + flags), writes it as
``run.lock`` next to its outputs, and is deterministic in (config, seed).

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed inputs, refusing to overwrite), 4 numeric abort (NaN/Inf loss).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from gff import config as gcfg
from gff.errors import ConfigError, FormatError, NumericError, UndefinedMetricError
from gff.model import MODES, GFFModel
from gff.synthdata import SPLITS, LabeledImage, generate_split, load_manifest, read_image, write_split
from gff.trainer import evaluate, export_cam, export_features, train, write_log
from gff.weights import export_weights, import_weights

log = logging.getLogger("gff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOCK_NAME = "run.lock"
WEIGHTS_NAME = "weights.gffw"
EVAL_SPLITS = ("test-seen", "test-unseen")


class DataError(Exception):
    """Missing or unusable inputs/outputs (exit code 3)."""


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory (gen: dataset directory)")
    common.add_argument("--weights", metavar="PATH", help="GFFW weight file (default OUT/weights.gffw)")
    common.add_argument("--ablation", choices=MODES, help="override the ablation mode")
    common.add_argument("--perturb", choices=("on", "off"), default="off",
                        help="apply the perturbation suite at evaluation time")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="gff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic corpus and manifests")
    sub.add_parser("train", parents=[common], help="run stage 1 then stage 2, write weights and log")
    sub.add_parser("eval", parents=[common], help="write metrics.csv for test-seen and test-unseen")
    sub.add_parser("sweep", parents=[common], help="bottleneck x FuseFormer-depth grid into sweep.csv")
    cam = sub.add_parser("cam", parents=[common], help="write a heatmap PGM next to each input image")
    cam.add_argument("inputs", nargs="+", metavar="IMAGE.ppm")
    sub.add_parser("features", parents=[common], help="write fused features of the test splits")
    return parser


def resolve_config(args: argparse.Namespace) -> gcfg.RunConfig:
    overrides = {"seed": args.seed, "ablation": args.ablation}
    if args.config:
        return gcfg.load(args.config, **overrides)
    return gcfg.loads("", **overrides)


def _out_dir(args, cfg: gcfg.RunConfig, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_lock(cfg: gcfg.RunConfig, out: Path) -> None:
    (out / LOCK_NAME).write_text(gcfg.dumps(cfg), encoding="utf-8")


def _load_split(cfg: gcfg.RunConfig, split: str) -> list[LabeledImage]:
    path = Path(cfg.data_dir) / f"{split}.csv"
    if not path.is_file():
        raise DataError(f"missing manifest {path} (run 'gff gen' first)")
    return load_manifest(path)


def _weights_path(args, out: Path) -> Path:
    return Path(args.weights) if args.weights else out / WEIGHTS_NAME


def _load_model(cfg: gcfg.RunConfig, path: Path) -> GFFModel:
    if not path.is_file():
        raise DataError(f"missing weight file {path}")
    template = GFFModel.create(cfg.model_config(), cfg.seed, cfg.ablation)
    registry = import_weights(path, template=template.registry)
    for name in registry.names():
        registry[name].requires_grad = False
    model = GFFModel(cfg.model_config(), registry, cfg.ablation)
    model.completed_stages.update((1, 2))
    return model


def _perturbation(args, cfg):
    return cfg.perturbation() if args.perturb == "on" else None


def cmd_gen(args, cfg: gcfg.RunConfig) -> int:
    out = Path(args.out or cfg.data_dir)
    existing = [s for s in SPLITS if (out / f"{s}.csv").exists()]
    if existing and not args.force:
        raise DataError(f"{out} already holds manifests ({', '.join(existing)}); use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.corpus_spec()
    for split in SPLITS:
        manifest = write_split(generate_split(spec, split), out, split)
        log.info("wrote %s", manifest)
    _write_lock(replace(cfg, data_dir=str(out)), out)
    return EXIT_OK


def cmd_train(args, cfg: gcfg.RunConfig) -> int:
    out = _out_dir(args, cfg, cfg.out_dir)
    weights = _weights_path(args, out)
    if weights.exists() and not args.force:
        raise DataError(f"{weights} exists; use --force to overwrite")
    data = _load_split(cfg, "train")
    model = GFFModel.create(cfg.model_config(), cfg.seed, cfg.ablation)
    rows = train(model, data, cfg.stage_plans(), seed=cfg.seed)
    export_weights(model.registry, weights)
    write_log(rows, out / "train_log.csv")
    _write_lock(cfg, out)
    log.info("trained mode %s (stages %s), wrote %s", cfg.ablation, sorted(model.completed_stages), weights)
    return EXIT_OK


def cmd_eval(args, cfg: gcfg.RunConfig) -> int:
    out = _out_dir(args, cfg, cfg.out_dir)
    model = _load_model(cfg, _weights_path(args, out))
    splits = {s: _load_split(cfg, s) for s in EVAL_SPLITS}
    report = evaluate(model, splits, _perturbation(args, cfg), seed=cfg.seed)
    name = "metrics_perturbed.csv" if args.perturb == "on" else "metrics.csv"
    report.write_csv(out / name)
    _write_lock(cfg, out)
    for r in report.rows:
        log.info("%s %s n=%d acc=%.4f ap=%.4f", r.split, r.family, r.n, r.acc, r.ap)
    return EXIT_OK


def cmd_sweep(args, cfg: gcfg.RunConfig) -> int:
    out = _out_dir(args, cfg, cfg.out_dir)
    data = _load_split(cfg, "train")
    splits = {s: _load_split(cfg, s) for s in EVAL_SPLITS}
    bns, depths = cfg.sweep_grid()
    path = out / "sweep.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("bottleneck", "depth", "acc", "ap"))
        for bn in bns:
            for depth in depths:
                model = GFFModel.create(cfg.model_config(bottleneck=bn, fuse_depth=depth), cfg.seed, cfg.ablation)
                train(model, data, cfg.stage_plans(), seed=cfg.seed)
                rep = evaluate(model, splits, _perturbation(args, cfg), seed=cfg.seed)
                wr.writerow((bn, depth, repr(rep.mean_acc), repr(rep.mean_ap)))
                log.info("bottleneck %d depth %d: acc %.4f ap %.4f", bn, depth, rep.mean_acc, rep.mean_ap)
    _write_lock(cfg, out)
    return EXIT_OK


def cam_path(image: Path) -> Path:
    return image.with_name(image.stem + ".cam.pgm")


def cmd_cam(args, cfg: gcfg.RunConfig) -> int:
    out = _out_dir(args, cfg, cfg.out_dir)
    model = _load_model(cfg, _weights_path(args, out))
    for name in args.inputs:
        src = Path(name)
        if not src.is_file():
            raise DataError(f"missing image {src}")
        img = LabeledImage(read_image(src), 0, "REAL", 0, path=str(src))
        export_cam(model, img, cam_path(src))
        log.info("wrote %s", cam_path(src))
    return EXIT_OK


def cmd_features(args, cfg: gcfg.RunConfig) -> int:
    out = _out_dir(args, cfg, cfg.out_dir)
    model = _load_model(cfg, _weights_path(args, out))
    images = [img for s in EVAL_SPLITS for img in _load_split(cfg, s)]
    n = export_features(model, images, out / "features.csv")
    _write_lock(cfg, out)
    log.info("wrote %d feature rows", n)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "cam": cmd_cam,
    "features": cmd_features,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="gff: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DataError, FormatError, UndefinedMetricError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric abort: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``sightline {train,eval,describe,weights}``.

Settings come from built-in defaults, then an optional JSON file given with
``--config`` (keys are :class:`RunConfig` field names), then flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from .data import IngestionError, ImageDecodeError, ImageRecord, PreprocessConfig, \
    ingest_directory, preprocess, read_image, split_dataset
from .optim import TrainingError
from .pipeline import CascadeModel, cascade_classify, deliver, render_text
from .tensor import DimensionError
from .train import TrainConfig, evaluate, run_training, write_stats_csv
from .vgg import ArchiveError, build_vgg16, build_vgg_mini, network_from_archive, \
    read_archive, replace_head, save_weights

log = logging.getLogger("sightline")

TTS_ENV = "SIGHTLINE_TTS_CMD"
TASK_CLASSES = {"pet": ["cat", "dog"], "scene": ["indoor", "outdoor"]}


@dataclass
class RunConfig:
    task: Optional[str] = None
    data: Optional[str] = None
    out: Optional[str] = None
    weights: Optional[str] = None
    scene_weights: Optional[str] = None
    pet_weights: Optional[str] = None
    image: Optional[str] = None
    init_weights: Optional[str] = None
    stats: Optional[str] = None
    arch: str = "vgg16"
    batch_size: int = 32
    max_epochs: int = 20
    learning_rate: float = 1e-4
    patience: int = 2
    seed: int = 0
    augment: bool = True
    freeze_backbone: bool = True
    train_fraction: float = 0.8
    normalize: bool = False
    tau: float = 0.5
    tts_cmd: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, max_epochs=self.max_epochs,
                           learning_rate=self.learning_rate, patience=self.patience,
                           seed=self.seed, freeze_backbone=self.freeze_backbone,
                           augment=self.augment)


class UsageError(Exception):
    pass


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="JSON", help="run configuration file")
    p.add_argument("--dump-config", action="store_true",
                   help="print the resolved configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    S = argparse.SUPPRESS
    p.add_argument("--task", choices=sorted(TASK_CLASSES), default=S)
    p.add_argument("--data", default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--weights", default=S)
    p.add_argument("--scene-weights", dest="scene_weights", default=S)
    p.add_argument("--pet-weights", dest="pet_weights", default=S)
    p.add_argument("--image", default=S)
    p.add_argument("--init-weights", dest="init_weights", default=S,
                   help="pretrained backbone archive to start from")
    p.add_argument("--stats", default=S, help="stats CSV path (default: next to --out)")
    p.add_argument("--arch", choices=["vgg16", "mini"], default=S)
    p.add_argument("--batch", dest="batch_size", type=int, default=S)
    p.add_argument("--epochs", dest="max_epochs", type=int, default=S)
    p.add_argument("--lr", dest="learning_rate", type=float, default=S)
    p.add_argument("--patience", type=int, default=S)
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--tau", type=float, default=S)
    p.add_argument("--tts-cmd", dest="tts_cmd", default=S)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False, default=S)
    p.add_argument("--unfreeze-backbone", dest="freeze_backbone", action="store_const",
                   const=False, default=S)
    p.add_argument("--normalize", action="store_const", const=True, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sightline",
                                     description="Indoor/outdoor and cat/dog photo descriptions.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, help_ in [("train", "train a binary classifier on <data>/<class>/ images"),
                        ("eval", "evaluate a weight archive on a labelled directory"),
                        ("describe", "describe one photo with the scene and pet classifiers"),
                        ("weights", "list the tensors in a weight archive")]:
        _add_common(sub.add_parser(name, help=help_, description=help_))
    return parser


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    values = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(raw) - names)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        values.update(raw)
    values.update({k: v for k, v in vars(args).items() if k in names})
    cfg = RunConfig(**values)
    if cfg.tts_cmd is None and environ.get(TTS_ENV):
        cfg.tts_cmd = environ[TTS_ENV]
    if not 0.5 <= cfg.tau <= 1:
        raise UsageError(f"--tau must lie in [0.5, 1], got {cfg.tau}")
    return cfg


def _require(cfg: RunConfig, *names: str):
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError("missing required option(s): "
                         + ", ".join("--" + n.replace("_", "-") for n in missing))


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} {p} does not exist")
    return p


def cmd_train(cfg: RunConfig, out) -> int:
    _require(cfg, "task", "data", "out")
    ds = ingest_directory(_existing(cfg.data, "dataset root"))
    expected = TASK_CLASSES[cfg.task]
    if ds.class_names != expected:
        raise IngestionError(f"task {cfg.task!r} expects class directories {expected}, "
                             f"found {ds.class_names}")
    train_ds, val_ds = split_dataset(ds, cfg.train_fraction, cfg.seed)
    if cfg.init_weights:
        base = network_from_archive(_existing(cfg.init_weights, "weights"))
    elif cfg.arch == "mini":
        base = build_vgg_mini(seed=cfg.seed)
    else:
        base = build_vgg16(1000, seed=cfg.seed)
    net = replace_head(base, 1, cfg.freeze_backbone, seed=cfg.seed)
    pre = PreprocessConfig(target_size=net.input_shape[1], normalize=cfg.normalize)
    net, stats = run_training(net, train_ds, val_ds, cfg.train_config(), pre)
    save_weights(net, cfg.out)
    stats_path = cfg.stats or str(Path(cfg.out).with_suffix(".csv"))
    write_stats_csv(stats, stats_path)
    best = min(stats, key=lambda s: s.val_loss)
    print(f"trained {cfg.task} classifier: {len(train_ds)} train / {len(val_ds)} val images, "
          f"{len(stats)} epochs, best epoch {best.epoch} (val_loss {best.val_loss:.6f}, "
          f"val_acc {best.val_acc:.6f})", file=out)
    print(f"weights: {cfg.out}", file=out)
    print(f"stats: {stats_path}", file=out)
    return 0


def cmd_eval(cfg: RunConfig, out) -> int:
    _require(cfg, "weights", "data")
    net = network_from_archive(_existing(cfg.weights, "weights"))
    ds = ingest_directory(_existing(cfg.data, "dataset root"))
    if len(ds.class_names) != 2:
        raise IngestionError(f"evaluation needs exactly two class directories, found {ds.class_names}")
    pre = PreprocessConfig(target_size=net.input_shape[1], normalize=cfg.normalize)
    report, loss = evaluate(net, ds, preprocess_config=pre, batch_size=cfg.batch_size)
    out.write(report.format())
    print(f"\nloss {loss:.6f}", file=out)
    return 0


def cmd_describe(cfg: RunConfig, out) -> int:
    _require(cfg, "scene_weights", "pet_weights", "image")
    scene = network_from_archive(_existing(cfg.scene_weights, "scene weights"))
    pet = network_from_archive(_existing(cfg.pet_weights, "pet weights"))
    if scene.input_shape != pet.input_shape:
        raise DimensionError(f"scene and pet networks take different inputs: "
                             f"{scene.input_shape} vs {pet.input_shape}")
    path = _existing(cfg.image, "image")
    record = ImageRecord(read_image(path), source=str(path))
    x = preprocess(record, PreprocessConfig(target_size=scene.input_shape[1], normalize=cfg.normalize))
    desc = cascade_classify(CascadeModel(scene, pet, cfg.tau), x)
    text = render_text(desc)
    print(text, file=out)
    audio_path = cfg.out or Path(path).stem + ".audio"
    result = deliver(text, cfg.tts_cmd, audio_path)
    if result.status == "ok":
        print(f"audio: {result.path}", file=sys.stderr)
    elif result.status == "text-only":
        print("audio: text-only (no text-to-speech command configured)", file=sys.stderr)
    else:
        print(f"audio: error: {result.error}", file=sys.stderr)
    return 0


def cmd_weights(cfg: RunConfig, out) -> int:
    _require(cfg, "weights")
    tensors = read_archive(_existing(cfg.weights, "weights"))
    total = 0
    for name, t in tensors.items():
        total += t.size
        print(f"{name}\t{t.dtype}\t{'x'.join(map(str, t.shape))}", file=out)
    print(f"{len(tensors)} tensors, {total} parameters", file=out)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "describe": cmd_describe,
            "weights": cmd_weights}


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.dump_config:
            out.write(cfg.to_json())
            return 0
        return COMMANDS[args.command](cfg, out)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"sightline: error: {e}", file=sys.stderr)
        return 2
    except (IngestionError, ImageDecodeError, ArchiveError, DimensionError, TrainingError,
            FileNotFoundError, OSError, ValueError) as e:
        print(f"sightline: {e}", file=sys.stderr)
        return 1


def main_entry():
    sys.exit(main())

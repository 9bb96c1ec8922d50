"""Command-line entry point: gen-data, train, eval, infer, dump-embeddings.

Settings come from three layers, later ones winning: built-in defaults,
an INI file passed with ``--config`` (sections ``[data]``, ``[train]``,
``[loss]``, ``[run]``), then command-line flags. Every key has a flag of
the same name with dashes, e.g. ``samples_per_class`` is
``--samples-per-class``. Unknown keys in the file are rejected.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import torch

from . import checkpoint as ckpt
from .alignment import LossConfig
from .synthdata import (
    DatasetFormatError, GeneratorConfig, SplitError, build_splits, generate_dataset,
    read_dataset, write_dataset,
)
from .textpipe import ConfigurationError, Vocabulary
from .trainer import MODALITIES, NumericError, PackedSplit, TrainConfig, build_bundle, train_epoch
from .zeroshot import ContractError, Scorer, dump_embeddings, evaluate

log = logging.getLogger("sensorlang")

EXIT_OK, EXIT_USAGE, EXIT_FILE, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration schema

def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(str(text).replace(",", " ").split())


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str


_G, _T, _L = GeneratorConfig(), TrainConfig(), LossConfig()
KEYS: list[Key] = [
    Key("data", "seed", int, _G.seed, "generator seed"),
    Key("data", "samples_per_class", int, _G.samples_per_class, "clips per class"),
    Key("data", "subjects", int, _G.subjects, "number of simulated subjects"),
    Key("data", "environments", int, _G.environments, "number of simulated environments"),
    Key("data", "video_size", int, _G.video_size, "video grid height and width"),
    Key("data", "lidar_points", float, _G.lidar_points, "mean LiDAR-like points per frame"),
    Key("data", "radar_points", float, _G.radar_points, "mean radar-like points per frame"),
    Key("data", "noise_levels", _floats, _G.noise_levels, "sensor noise per environment"),
    Key("data", "clutter_rates", _floats, _G.clutter_rates, "mean clutter points per environment"),
    Key("train", "seed", int, _T.seed, "initialization and shuffling seed"),
    Key("train", "batch_size", int, _T.batch_size, "samples per step"),
    Key("train", "lr", float, _T.lr, "base learning rate"),
    Key("train", "momentum", float, _T.momentum, "SGD momentum"),
    Key("train", "weight_decay", float, _T.weight_decay, "L2 weight decay"),
    Key("train", "epochs", int, _T.epochs, "training epochs"),
    Key("train", "lr_steps", _ints, _T.lr_steps, "epochs (0-based) at which the rate decays"),
    Key("train", "lr_decay", float, _T.lr_decay, "decay factor per step"),
    Key("train", "joint", _bool, _T.joint, "train all modalities in one model"),
    Key("train", "description", _bool, _T.description, "append class descriptions to names"),
    Key("train", "soft_prompt", _bool, _T.soft_prompt, "learnable prompt vectors"),
    Key("train", "n_prompts", int, _T.n_prompts, "prompt vectors on each side of the text"),
    Key("train", "mode", str, _T.mode, "aligned or vanilla (one-hot classifier)"),
    Key("train", "zero_shot_text", str, _T.zero_shot_text, "name_desc or name_name"),
    Key("loss", "tau", float, _L.tau, "InfoNCE temperature"),
    Key("loss", "alpha", float, _L.alpha, "video loss weight"),
    Key("loss", "beta", float, _L.beta, "LiDAR-like loss weight"),
    Key("loss", "gamma", float, _L.gamma, "radar-like loss weight"),
    Key("run", "data", str, "data/dataset.bin", "dataset file"),
    Key("run", "out_dir", str, "runs/default", "output directory"),
    Key("run", "checkpoint", str, "", "checkpoint file (defaults to <out_dir>/model.ckpt)"),
    Key("run", "split", str, "random", "random, cross_subject or cross_environment"),
    Key("run", "split_seed", int, 0, "seed of the random split"),
    Key("run", "modality", _words, MODALITIES, "modalities to train or evaluate"),
    Key("run", "labels", str, "full", "label space: full or seen"),
    Key("run", "index", int, 0, "sample index for infer"),
    Key("run", "subset", str, "test", "split side for infer and dump-embeddings: train or test"),
    Key("run", "out", str, "", "output file (gen-data dataset, dump-embeddings table)"),
    Key("run", "log_format", str, "plain", "console log format: plain or json"),
]

COMMAND_SECTIONS = {
    "gen-data": ("data", "run"),
    "train": ("train", "loss", "run"),
    "eval": ("run",),
    "infer": ("run",),
    "dump-embeddings": ("run",),
}


def _flag(key: Key) -> str:
    return "--" + key.name.replace("_", "-")


def _keys_for(command: str) -> dict[str, Key]:
    return {k.name: k for k in KEYS if k.section in COMMAND_SECTIONS[command]}


def resolve(command: str, args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    """Defaults, then the config file, then explicit flags."""
    keys = _keys_for(command)
    values = {k.section: {} for k in keys.values()}
    for k in keys.values():
        values[k.section][k.name] = k.default
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read(path)
        known = {(k.section, k.name): k for k in KEYS}
        for section in parser.sections():
            for name, raw in parser.items(section):
                key = known.get((section, name))
                if key is None:
                    raise UsageError(f"unknown config key [{section}] {name}")
                if section not in values:
                    continue   # belongs to another command
                try:
                    values[section][name] = key.parse(raw)
                except ValueError as exc:
                    raise UsageError(f"bad value for [{section}] {name}: {exc}") from None
    for k in keys.values():
        raw = getattr(args, k.name, None)
        if raw is not None:
            try:
                values[k.section][k.name] = k.parse(raw) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise UsageError(f"bad value for {_flag(k)}: {exc}") from None
    return values


def render_config(values: dict[str, dict[str, Any]]) -> str:
    lines = []
    for section, entries in values.items():
        lines.append(f"[{section}]")
        lines += [f"{name} = {_fmt(v)}" for name, v in entries.items()]
        lines.append("")
    return "\n".join(lines)


def _echo_config(values: dict, directory: Path, name: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / name).write_text(render_config(values))


# ---------------------------------------------------------------------------
# helpers

def _generator_config(d: dict) -> GeneratorConfig:
    try:
        return GeneratorConfig(**d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _train_config(d: dict, modalities: tuple[str, ...]) -> TrainConfig:
    try:
        return TrainConfig(**d, modalities=modalities)
    except (ValueError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from None


def _modalities(run: dict) -> tuple[str, ...]:
    mods = tuple(run["modality"])
    bad = [m for m in mods if m not in MODALITIES]
    if bad or not mods:
        raise UsageError(f"--modality must name some of {MODALITIES}, got {mods}")
    return mods


def _load_data(run: dict):
    path = Path(run["data"])
    if not path.is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return read_dataset(path)


def _split(dataset, run: dict) -> tuple[list[int], list[int]]:
    if run["split"] not in ("random", "cross_subject", "cross_environment"):
        raise UsageError(f"unknown split {run['split']!r}")
    return build_splits(dataset, run["split"], run["split_seed"])


def _checkpoint_path(run: dict) -> Path:
    return Path(run["checkpoint"]) if run["checkpoint"] else Path(run["out_dir"]) / "model.ckpt"


def _load_model(run: dict, dataset):
    path = _checkpoint_path(run)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    bundle = ckpt.load(path)
    if bundle.registry.digest() != dataset.registry.digest():
        raise CompatibilityError(
            f"class registry of checkpoint ({bundle.registry.digest()}) differs from dataset ({dataset.registry.digest()})"
        )
    return bundle


def _pack(dataset, indices, bundle) -> PackedSplit:
    return PackedSplit.from_dataset(dataset, indices, bundle.model_cfg.point_budget, bundle.model_cfg.knn)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(values: dict) -> int:
    cfg = _generator_config(values["data"])
    out = Path(values["run"]["out"] or values["run"]["data"])
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset = generate_dataset(cfg)
    write_dataset(dataset, out)
    _echo_config(values, out.parent, out.name + ".ini")
    reg = dataset.registry
    print(f"wrote {len(dataset)} samples to {out}")
    print(f"classes: {len(reg)} ({len(reg.seen)} seen, {len(reg.unseen)} unseen)")
    for pos, e in enumerate(reg.unseen):
        print(f"  Z{pos + 1:02d} {e.class_id:2d} {e.name}")
    return EXIT_OK


def epoch_line(stats, modalities) -> str:
    parts = [f"epoch={stats.epoch}", f"lr={stats.lr:g}", f"joint={stats.joint:.6f}"]
    parts += [f"{m}={stats.per_modality[m]:.6f}" for m in modalities if m in stats.per_modality]
    return " ".join(parts)


def cmd_train(values: dict) -> int:
    run = values["run"]
    mods = _modalities(run)
    train_cfg = _train_config(values["train"], mods)
    try:
        loss_cfg = LossConfig(**values["loss"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = _load_data(run)
    train_idx, _ = _split(dataset, run)
    out_dir = Path(run["out_dir"])
    _echo_config(values, out_dir, "config.ini")
    vocab = Vocabulary.from_registry(dataset.registry)
    bundle = build_bundle(dataset.registry, vocab, train_cfg, loss_cfg)
    data = _pack(dataset, train_idx, bundle)
    plain = (out_dir / "train.log").open("a")
    machine = (out_dir / "train.jsonl").open("a")
    try:
        for _ in range(train_cfg.epochs):
            stats = train_epoch(bundle, data)
            line = epoch_line(stats, mods)
            plain.write(line + "\n")
            plain.flush()
            machine.write(json.dumps({"epoch": stats.epoch, "lr": stats.lr, "joint": stats.joint,
                                      **{m: stats.per_modality[m] for m in mods if m in stats.per_modality}},
                                     sort_keys=True) + "\n")
            machine.flush()
            log.info(line)
    finally:
        plain.close()
        machine.close()
    path = ckpt.save(bundle, _checkpoint_path(run))
    print(f"checkpoint written to {path}")
    return EXIT_OK


def cmd_eval(values: dict) -> int:
    run = values["run"]
    dataset = _load_data(run)
    bundle = _load_model(run, dataset)
    _, test_idx = _split(dataset, run)
    data = _pack(dataset, test_idx, bundle)
    out_dir = Path(run["out_dir"])
    _echo_config(values, out_dir, "eval_config.ini")
    for m in _modalities(run):
        report = evaluate(bundle, data, m, run["labels"], run["split"])
        stem = out_dir / f"eval_{m}_{run['split']}_{run['labels']}"
        table = report.table()
        stem.with_suffix(".txt").write_text(table)
        stem.with_suffix(".json").write_text(report.to_json())
        print(table)
    return EXIT_OK


def _infer_inputs(run: dict, dataset, bundle, modality: str):
    train_idx, test_idx = _split(dataset, run)
    side = {"train": train_idx, "test": test_idx}.get(run["subset"])
    if side is None:
        raise UsageError("--subset must be train or test")
    if not 0 <= run["index"] < len(side):
        raise UsageError(f"--index {run['index']} out of range for {len(side)} {run['subset']} samples")
    sample_idx = side[run["index"]]
    data = _pack(dataset, [sample_idx], bundle)
    return dataset.samples[sample_idx], data.inputs(modality, torch.tensor([0]))


def cmd_infer(values: dict) -> int:
    run = values["run"]
    mods = _modalities(run)
    if len(mods) != 1:
        raise UsageError("infer needs exactly one --modality")
    dataset = _load_data(run)
    bundle = _load_model(run, dataset)
    sample, inputs = _infer_inputs(run, dataset, bundle, mods[0])
    scorer = Scorer(bundle, mods[0], run["labels"])
    (pred,) = scorer.rankings(scorer.scores(scorer.embed(inputs)))
    names = {e.class_id: e.name for e in dataset.registry}
    print(f"sample class {sample.class_id} ({names[sample.class_id]}), modality {mods[0]}, labels {run['labels']}")
    for rank, (cid, score) in enumerate(pred.top(5), 1):
        print(f"{rank}. {cid:2d} {names[cid]:<28s} {score:+.6f}")
    return EXIT_OK


def cmd_dump_embeddings(values: dict) -> int:
    run = values["run"]
    dataset = _load_data(run)
    bundle = _load_model(run, dataset)
    train_idx, test_idx = _split(dataset, run)
    side = {"train": train_idx, "test": test_idx}.get(run["subset"])
    if side is None:
        raise UsageError("--subset must be train or test")
    mods = [m for m in _modalities(run) if m in bundle.modalities]
    out = Path(run["out"] or Path(run["out_dir"]) / "embeddings.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    dump_embeddings(bundle, _pack(dataset, side, bundle), out, mods)
    print(f"embeddings written to {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "dump-embeddings": cmd_dump_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sensorlang", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="INI file with [data]/[train]/[loss]/[run] sections")
        for key in _keys_for(command).values():
            if key.parse is _bool:
                p.add_argument(_flag(key), dest=key.name, action="store_const", const=True, default=None,
                               help=f"{key.help} (default {_fmt(key.default)})")
                p.add_argument("--no-" + key.name.replace("_", "-"), dest=key.name,
                               action="store_const", const=False)
            else:
                p.add_argument(_flag(key), dest=key.name, default=None, metavar=key.name.upper(),
                               help=f"{key.help} (default {_fmt(key.default)})")
    return parser


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(fmt: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if fmt == "json" else logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("sensorlang")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        values = resolve(args.command, args)
        if values["run"]["log_format"] not in ("plain", "json"):
            raise UsageError("--log-format must be plain or json")
        _setup_logging(values["run"]["log_format"])
        torch.set_num_threads(1)
        return COMMANDS[args.command](values)
    except (UsageError, ConfigurationError, SplitError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT if isinstance(exc, ContractError) else EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError, DatasetFormatError, ckpt.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FILE
    except CompatibilityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

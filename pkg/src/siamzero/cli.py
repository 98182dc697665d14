"""Command-line entry point: ``siamzero <subcommand> [--config FILE] [flags]``.

Configuration is a flat ``key=value`` file; command-line flags override file
values, and ``SIAMZERO_SEED`` supplies the seed when neither sets it. Every
run prints its resolved configuration before doing any work.

Exit status: 0 success, 1 domain error, 2 usage or configuration error.
Failures print one ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import evalsuite as ev
from . import gradsuite
from .dataio import (
    DataError,
    load_checkpoint,
    load_manifest,
    load_pgm,
    load_szim,
    save_checkpoint,
    save_szim,
    write_feature_matrix,
    write_manifest,
)
from .matcher import build_template_matrix, classify, classify_restricted
from .pairs import generate_pairs, write_pairs_tsv
from .prep import preprocess
from .siamese import DEFAULT_ARCH, ArchitectureSpec, SimilarityHead, build_model, embed
from .toygen import write_toy_dataset

log = logging.getLogger("siamzero")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    kind: Callable[[str], object]
    default: object
    help: str


_TRAIN_DEFAULTS = ev.TrainConfig()

KEYS: dict[str, Key] = {
    # optimization, defaults from TrainConfig
    "batch_size": Key(int, _TRAIN_DEFAULTS.batch_size, "pairs per SGD step"),
    "lr0": Key(float, _TRAIN_DEFAULTS.lr0, "initial learning rate"),
    "lr_decay": Key(float, _TRAIN_DEFAULTS.lr_decay, "plateau multiplier"),
    "plateau_patience": Key(int, _TRAIN_DEFAULTS.plateau_patience, "epochs without improvement before decay"),
    "max_decays": Key(int, _TRAIN_DEFAULTS.max_decays, "decays before stopping"),
    "momentum": Key(float, _TRAIN_DEFAULTS.momentum, "SGD momentum"),
    "weight_decay": Key(float, _TRAIN_DEFAULTS.weight_decay, "L2 weight decay"),
    "max_epochs": Key(int, _TRAIN_DEFAULTS.max_epochs, "epoch cap"),
    "n": Key(int, _TRAIN_DEFAULTS.n, "negatives per (template, other class) cell"),
    "prob_clamp": Key(float, _TRAIN_DEFAULTS.prob_clamp, "probability clamp in the loss"),
    "nonpositive_head": Key(_parse_bool, _TRAIN_DEFAULTS.nonpositive_head, "keep head weights <= 0"),
    "seed": Key(int, 0, "global seed (falls back to SIAMZERO_SEED)"),
    # model
    "arch": Key(str, DEFAULT_ARCH, "conv/pool layer string"),
    "final_activation": Key(str, "none", "'none' or 'relu' after the dense layer"),
    # protocol
    "c_seen": Key(int, None, "number of seen classes"),
    "test_fraction": Key(float, 0.25, "held-out fraction per class"),
    "threshold": Key(int, 0, "foreground threshold for cropping"),
    "top_k": Key(int, 10, "error report length"),
    # paths
    "manifest": Key(str, None, "sample manifest"),
    "templates": Key(str, None, "template manifest"),
    "checkpoint": Key(str, None, "checkpoint file"),
    "out": Key(str, None, "output path"),
    "image": Key(str, None, "query image (PGM or SZIM)"),
    "restrict": Key(str, None, "comma-separated allowed class ids"),
    # toy generator
    "classes": Key(int, 10, "toy classes"),
    "samples": Key(int, 20, "toy samples per class"),
    "complexity": Key(int, 4, "strokes per toy glyph"),
    "jitter": Key(int, 1, "toy endpoint jitter amplitude"),
}


def parse_config_text(text: str) -> dict[str, object]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = _convert(key, value, f"line {lineno}")
    return values


def _convert(key: str, value: str, where: str) -> object:
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")
    try:
        return KEYS[key].kind(value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def resolve_config(file_values: dict[str, object], flag_values: dict[str, object],
                   env: dict[str, str] | None = None) -> dict[str, object]:
    """Defaults < config file < flags; ``SIAMZERO_SEED`` fills ``seed`` if neither set it."""
    env = os.environ if env is None else env
    config = {k: spec.default for k, spec in KEYS.items()}
    if "seed" not in file_values and flag_values.get("seed") is None and "SIAMZERO_SEED" in env:
        config["seed"] = _convert("seed", env["SIAMZERO_SEED"], "SIAMZERO_SEED")
    config.update(file_values)
    config.update({k: v for k, v in flag_values.items() if v is not None})
    validate_config(config)
    return config


def train_config(config: dict[str, object]) -> ev.TrainConfig:
    names = ev.TrainConfig.__dataclass_fields__
    return ev.TrainConfig(**{k: config[k] for k in names if k in config})


def validate_config(config: dict[str, object]) -> None:
    try:
        train_config(config).validate()
        ArchitectureSpec.parse(str(config["arch"]), final_activation=str(config["final_activation"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for key in ("classes", "samples", "complexity", "top_k"):
        if config[key] < 1:
            raise ConfigError(f"{key} must be positive, got {config[key]}")
    if config["c_seen"] is not None and config["c_seen"] < 1:
        raise ConfigError(f"c_seen must be positive, got {config['c_seen']}")
    if not 0 <= config["test_fraction"] < 1:
        raise ConfigError(f"test_fraction must lie in [0, 1), got {config['test_fraction']}")


def _require(config, *keys) -> None:
    missing = [k for k in keys if config[k] is None]
    if missing:
        raise ConfigError("missing required " + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def _print_header(command: str, config: dict[str, object]) -> None:
    print(f"# siamzero {command}")
    for key in sorted(config):
        print(f"# {key}={config[key]}")
    sys.stdout.flush()


# --- subcommands -------------------------------------------------------------------


def _spec(config) -> ArchitectureSpec:
    return ArchitectureSpec.parse(str(config["arch"]), final_activation=str(config["final_activation"]))


def _load_model(config):
    ckpt = load_checkpoint(config["checkpoint"])
    arch = ckpt.meta.get("arch", config["arch"])
    spec = ArchitectureSpec.parse(arch, final_activation=ckpt.meta.get("final_activation", "none"))
    load_checkpoint(config["checkpoint"], spec.param_shapes())
    return ckpt, spec


def _load_query(path: str, threshold: int) -> np.ndarray:
    if path.endswith(".szim"):
        return load_szim(path)
    return preprocess(load_pgm(path), threshold)


def cmd_prep(config) -> int:
    _require(config, "manifest", "out")
    manifest = load_manifest(config["manifest"])
    out = Path(config["out"])
    entries = []
    for rel, cls in manifest.entries:
        target = Path(rel).with_suffix(".szim")
        (out / target).parent.mkdir(parents=True, exist_ok=True)
        save_szim(preprocess(load_pgm(manifest.resolve(rel)), config["threshold"]), out / target)
        entries.append((target.as_posix(), cls))
    write_manifest(entries, out / "manifest.tsv")
    print(f"wrote {len(entries)} images to {out}")
    return EXIT_OK


def cmd_pairs(config) -> int:
    _require(config, "manifest", "out")
    manifest = load_manifest(config["manifest"])
    by_class: dict[int, list[str]] = {}
    for rel, cls in manifest.entries:
        by_class.setdefault(cls, []).append(rel)
    if config["c_seen"] is not None:
        split = ev.split_charset(sorted(by_class), config["c_seen"], config["seed"])
        by_class = {c: by_class[c] for c in split.seen}
    pairs = generate_pairs(by_class, config["n"], config["seed"])
    write_pairs_tsv(pairs, config["out"])
    pos, neg = pairs.counts()
    print(f"wrote {len(pairs)} pairs ({pos} positive, {neg} negative) to {config['out']}")
    return EXIT_OK


def cmd_train(config) -> int:
    _require(config, "manifest", "templates", "c_seen", "out")
    spec = _spec(config)
    cfg = train_config(config)
    data = ev.load_glyphs(config["manifest"], config["threshold"])
    templates = ev.load_templates(config["templates"], config["threshold"])
    exp = ev.run_experiment(data, templates, spec, cfg, config["c_seen"], config["test_fraction"])
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "arch": spec.to_string(),
        "final_activation": spec.final_activation,
        "seed": config["seed"],
        "c_seen": config["c_seen"],
        "test_fraction": config["test_fraction"],
        "n": config["n"],
        "best_epoch": exp.result.best_epoch,
        "seen": ",".join(map(str, exp.split.seen)),
        "unseen": ",".join(map(str, exp.split.unseen)),
    }
    save_checkpoint(exp.result.params, out / "model.szck", meta)
    ev.write_history_csv(exp.result.history, out / "history.csv")
    with open(out / "step_losses.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{loss!r}\n" for loss in exp.result.step_losses)
    ev.write_report_tsv(exp.report, out / "report.tsv", config["c_seen"], config["n"])
    print("\t".join(("c", "n") + ev.COLUMNS))
    print("\t".join([str(config["c_seen"]), str(config["n"])] + exp.report.row()))
    return EXIT_OK


def cmd_eval(config) -> int:
    _require(config, "checkpoint", "manifest", "templates", "out")
    ckpt, spec = _load_model(config)
    meta = ckpt.meta
    c_seen = int(meta.get("c_seen", config["c_seen"] or 0))
    seed = int(meta.get("seed", config["seed"]))
    test_fraction = float(meta.get("test_fraction", config["test_fraction"]))
    data = ev.load_glyphs(config["manifest"], config["threshold"])
    templates = ev.load_templates(config["templates"], config["threshold"])
    split = ev.split_charset(sorted(set(int(c) for c in data.labels)), c_seen, seed)
    if "seen" in meta and meta["seen"] != ",".join(map(str, split.seen)):
        raise DataError("checkpoint split does not match this dataset")
    _, test_idx = ev.split_samples(data.labels, test_fraction, seed)
    report = ev.evaluate(ckpt.params, spec, split, data.subset(test_idx), templates)
    ev.write_report_tsv(report, config["out"], c_seen, meta.get("n", ""))
    print("\t".join(("c", "n") + ev.COLUMNS))
    print("\t".join([str(c_seen), meta.get("n", "")] + report.row()))
    for cell in ev.error_report(report, config["top_k"]):
        print(f"confusion\t{cell.truth}\t{cell.prediction}\t{cell.count}\t{cell.exemplar}")
    return EXIT_OK


def cmd_classify(config) -> int:
    _require(config, "checkpoint", "templates", "image")
    ckpt, spec = _load_model(config)
    templates = ev.load_templates(config["templates"], config["threshold"])
    F = build_template_matrix(ckpt.params, templates.images, templates.class_ids, spec)
    head = SimilarityHead.from_params(ckpt.params)
    feature = embed(ckpt.params, _load_query(config["image"], config["threshold"])[None], "infer", spec)[0]
    if config["restrict"]:
        try:
            allowed = [int(tok) for tok in config["restrict"].split(",") if tok.strip()]
        except ValueError:
            raise ConfigError(f"--restrict expects comma-separated integers, got {config['restrict']!r}") from None
        cls, prob = classify_restricted(feature, F, head, allowed)
    else:
        cls, prob = classify(feature, F, head)
    print(f"{cls}\t{prob!r}")
    return EXIT_OK


def cmd_export_features(config) -> int:
    _require(config, "checkpoint", "templates", "out")
    ckpt, spec = _load_model(config)
    templates = ev.load_templates(config["templates"], config["threshold"])
    F = build_template_matrix(ckpt.params, templates.images, templates.class_ids, spec)
    write_feature_matrix(F, config["out"])
    print(f"wrote {F.rows}x{F.features.shape[1]} feature matrix to {config['out']}")
    return EXIT_OK


def cmd_gradcheck(config) -> int:
    ok = True
    for result in gradsuite.run_all():
        passed = result.passed()
        ok &= passed
        print(f"{result.name}\tmax_rel_err={result.max_error:.3e}\tchecked={result.checked}"
              f"\tskipped_kinks={result.skipped}\t{'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_DOMAIN


def cmd_gen_toy(config) -> int:
    _require(config, "out")
    paths = write_toy_dataset(config["out"], config["classes"], config["samples"], config["seed"],
                              config["complexity"], config["jitter"])
    print(f"wrote {config['classes']} classes x {config['samples']} samples: {paths['manifest']}, {paths['templates']}")
    return EXIT_OK


COMMANDS: dict[str, tuple[Callable[[dict], int], tuple[str, ...], str]] = {
    "prep": (cmd_prep, ("manifest", "out", "threshold"), "preprocess a PGM manifest into SZIM files"),
    "pairs": (cmd_pairs, ("manifest", "out", "n", "seed", "c_seen"), "write the training pair list"),
    "train": (cmd_train, ("manifest", "templates", "out", "c_seen", "seed", "test_fraction", "threshold",
                          "batch_size", "lr0", "lr_decay", "plateau_patience", "max_decays", "momentum",
                          "weight_decay", "max_epochs", "n", "prob_clamp", "nonpositive_head", "arch",
                          "final_activation"), "train on seen classes and evaluate"),
    "eval": (cmd_eval, ("checkpoint", "manifest", "templates", "out", "threshold", "top_k", "seed", "c_seen",
                        "test_fraction"), "write the five-column accuracy report"),
    "classify": (cmd_classify, ("checkpoint", "templates", "image", "restrict", "threshold"),
                 "classify one image by template matching"),
    "export-features": (cmd_export_features, ("checkpoint", "templates", "out", "threshold"),
                        "write the template feature matrix"),
    "gradcheck": (cmd_gradcheck, (), "run the finite-difference gradient suites"),
    "gen-toy": (cmd_gen_toy, ("out", "classes", "samples", "seed", "complexity", "jitter"),
                "write the synthetic glyph dataset"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error: usage: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="siamzero", description="Template-matching siamese glyph recognizer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    for name, (_, keys, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value configuration file")
        for key in keys:
            spec = KEYS[key]
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, type=spec.kind,
                           help=f"{spec.help} (default {spec.default})")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: usage: missing subcommand", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    handler, keys, _ = COMMANDS[args.command]
    try:
        file_values = {}
        if args.config:
            file_values = parse_config_text(Path(args.config).read_text(encoding="utf-8"))
        config = resolve_config(file_values, {k: getattr(args, k) for k in keys})
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _print_header(args.command, config)
    try:
        return handler(config)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"error: value: {exc}", file=sys.stderr)
    except RuntimeError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
    return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())

"""``lhdff`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import audio
from .ablation import MissingCheckpointError, evaluate_checkpoints, run_ablation_eval
from .audio import load_wav, log_mel, save_lmel
from .checkpoint import CheckpointIntegrityError, UnsupportedVersionError, VocabularyMismatchError, load_checkpoint
from .core import NonFiniteError, NonFiniteGradientError
from .data import compute_features, make_dataset, vocab_from_manifest
from .decoding import decode
from .model import EmbeddingConfigError, InputTooShortError, load_embedding_table
from .synth import generate_micro_dataset
from .text import DatasetFormatError, DatasetManifest, EmptyCaptionError, Vocabulary, load_clotho_csv, write_clotho_csv
from .training import TrainConfig, TrainingDivergedError, build_model, model_from_checkpoint, train

log = logging.getLogger("lhdff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_ERRORS = (OSError, DatasetFormatError, EmptyCaptionError, audio.AudioFormatError, audio.ClipTooShortError,
               CheckpointIntegrityError, UnsupportedVersionError, VocabularyMismatchError, EmbeddingConfigError,
               InputTooShortError, MissingCheckpointError)
NUMERIC_ERRORS = (TrainingDivergedError, NonFiniteError, NonFiniteGradientError, FloatingPointError)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------- config

def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _coerce(field: dataclasses.Field, text: str):
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", str(field.type))
    if "bool" in kind:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{field.name}: expected a boolean, got {text!r}")
    try:
        if "int" in kind:
            return int(text)
        if "float" in kind:
            return None if text.lower() == "none" else float(text)
    except ValueError:
        raise UsageError(f"{field.name}: cannot parse {text!r}") from None
    return text


_FLAG_TO_FIELD = {"epochs": "epochs", "batch_size": "batch_size", "lr": "base_lr", "seed": "seed", "mode": "mode",
                  "warmup_epochs": "warmup_epochs", "decay_every": "decay_every", "dropout": "dropout",
                  "embedding_mode": "embedding_mode", "checkpoint_every": "checkpoint_every"}


def resolve_train_config(args) -> TrainConfig:
    """Defaults, then the config file, then explicit command-line flags."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    if args.config:
        for key, text in read_config_file(args.config).items():
            key = _FLAG_TO_FIELD.get(key, key)
            if key not in fields:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = _coerce(fields[key], text)
    for flag, name in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[name] = value
    if getattr(args, "no_augment", False):
        values["augment"] = False
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def echo_config(out_dir: Path, entries: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in entries.items()]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- data loading

def _manifest_from_args(args, split: str = "train") -> tuple[DatasetManifest, Optional[Path]]:
    """Either a prepared directory (uses its cached spectrograms) or a raw CSV + audio root."""
    if getattr(args, "prepared", None):
        root = Path(args.prepared)
        if not (root / "manifest.csv").is_file():
            raise DataError(f"{root} is not a prepared directory (no manifest.csv)")
        manifest = load_clotho_csv(root / "manifest.csv", root, split)
        cache = root / "mels"
    elif getattr(args, "csv", None):
        if not args.audio_root:
            raise UsageError("--csv requires --audio-root")
        manifest = load_clotho_csv(args.csv, args.audio_root, split)
        cache = None
    else:
        raise UsageError("give either --prepared DIR or --csv FILE --audio-root DIR")
    for name in manifest.skipped:
        log.warning("skipped %s (missing audio or captions)", name)
    if not manifest.items:
        raise DataError("dataset has no usable items")
    return manifest, cache


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    csv_path = generate_micro_dataset(args.seed, args.n, out)
    if args.holdout:
        if not 0 < args.holdout < args.n:
            raise UsageError("--holdout must be between 1 and n-1")
        manifest = load_clotho_csv(csv_path, out)
        rows = [(it.audio_path.name, it.references) for it in manifest.items]
        k = args.n - args.holdout
        write_clotho_csv(out / "train.csv", rows[:k], 1)
        write_clotho_csv(out / "test.csv", rows[k:], 1)
    print(csv_path)
    return EXIT_OK


def cmd_prepare(args) -> int:
    out = Path(args.out)
    manifest = load_clotho_csv(args.csv, args.audio_root)
    if not manifest.items:
        raise DataError(f"{args.csv}: no usable items ({len(manifest.skipped)} skipped)")
    echo_config(out, {"command": "prepare", "csv": args.csv, "audio_root": args.audio_root})
    (out / "mels").mkdir(exist_ok=True)
    for item in manifest.items:
        save_lmel(out / "mels" / f"{item.clip_id}.lmel", log_mel(load_wav(item.audio_path)))
    vocab_from_manifest(manifest, args.min_count).save(out / "vocab.txt")
    n_caps = max(len(it.references) for it in manifest.items)
    write_clotho_csv(out / "manifest.csv", [(str(it.audio_path.resolve()), it.references) for it in manifest.items],
                     n_caps)
    (out / "skipped.txt").write_text("".join(f"{name}\n" for name in manifest.skipped))
    print(f"prepared {len(manifest.items)} clips, skipped {len(manifest.skipped)} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    out = Path(args.out)
    manifest, cache = _manifest_from_args(args)
    if getattr(args, "prepared", None) and (Path(args.prepared) / "vocab.txt").is_file():
        vocab = Vocabulary.load(Path(args.prepared) / "vocab.txt")
    else:
        vocab = vocab_from_manifest(manifest)
    data = make_dataset(manifest, vocab, compute_features(manifest, cache), config.l_max)
    val_data = None
    if args.val_csv:
        val_manifest = load_clotho_csv(args.val_csv, args.val_audio_root or args.audio_root, "val")
        val_data = make_dataset(val_manifest, vocab, l_max=config.l_max)
    table = load_embedding_table(args.embedding_table) if args.embedding_table else None
    if table is not None and config.embedding_mode == "frozen":
        config = dataclasses.replace(config, embedding_mode="imported")
    echo_config(out, {"command": "train", **config.to_dict(), "prepared": args.prepared, "csv": args.csv,
                      "audio_root": args.audio_root, "resume": args.resume})
    vocab.save(out / "vocab.txt")
    model = build_model(len(vocab), config, table)
    report = train(config, data, vocab, model, out, val_data, resume=args.resume, embedding_table=table)
    if report.epoch_records:
        print(f"trained {len(report.epoch_records)} epochs, final loss {report.epoch_losses[-1]:.6f} -> {out}")
    return EXIT_OK


def cmd_caption(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab, config = model_from_checkpoint(ckpt)
    mel = log_mel(load_wav(args.wav))
    beam = args.beam if args.beam and args.beam > 1 else None
    tokens = decode(model, mel.frames, beam, mode=args.mode or config.mode)
    print(" ".join(vocab.decode(tokens)))
    return EXIT_OK


def cmd_eval(args) -> int:
    manifest, cache = _manifest_from_args(args, split="test")
    mels = compute_features(manifest, cache)
    out = Path(args.out)
    if args.ablation:
        paths = dict(zip(("dual", "fusion_only", "high_only"), args.checkpoint))
        if len(args.checkpoint) != 3:
            raise UsageError("--ablation needs three checkpoints: dual, fusion-only, high-only")
        table = run_ablation_eval(paths, manifest, mels, args.beam)
    else:
        labels = [Path(p).parent.name + "/" + Path(p).stem for p in args.checkpoint]
        if len(set(labels)) != len(labels):
            labels = [str(p) for p in args.checkpoint]
        table = evaluate_checkpoints(dict(zip(labels, args.checkpoint)), manifest, mels, args.beam)
    echo_config(out, {"command": "eval", "checkpoints": " ".join(args.checkpoint), "beam": args.beam,
                      "ablation": args.ablation})
    table.write(out)
    print(table.to_text())
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_params(args) -> int:
    vocab_size = args.vocab_size
    if args.checkpoint:
        vocab_size = len(Vocabulary.from_text(load_checkpoint(args.checkpoint).vocab_text))
    model = build_model(vocab_size, TrainConfig(embedding_mode="trainable"))
    print(model.count_parameters().format())
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lhdff", description="Low/high-dimensional feature fusion audio captioning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic tone/noise captioning dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--holdout", type=int, default=0, help="also write train.csv/test.csv with the last N held out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build vocabulary, cached spectrograms and a manifest")
    p.add_argument("--csv", required=True)
    p.add_argument("--audio-root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=1)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--prepared")
    p.add_argument("--csv")
    p.add_argument("--audio-root")
    p.add_argument("--val-csv")
    p.add_argument("--val-audio-root")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=("dual", "fusion-only", "high-only", "fusion_only", "high_only"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--decay-every", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--embedding-mode", choices=("frozen", "trainable", "imported"))
    p.add_argument("--embedding-table")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="caption one WAV file")
    p.add_argument("checkpoint")
    p.add_argument("wav")
    p.add_argument("--beam", type=int)
    p.add_argument("--mode", choices=("dual", "fusion_only", "high_only"))
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="score checkpoints on a test split")
    p.add_argument("checkpoint", nargs="+")
    p.add_argument("--prepared")
    p.add_argument("--csv")
    p.add_argument("--audio-root")
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int)
    p.add_argument("--ablation", action="store_true", help="checkpoints are dual, fusion-only, high-only")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run the built-in verification battery")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("params", help="print the parameter inventory")
    p.add_argument("--vocab-size", type=int, default=5000)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lhdff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.seterr(all="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lhdff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as exc:
        print(f"lhdff: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, *DATA_ERRORS) as exc:
        print(f"lhdff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"lhdff: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

"""Caption a test set with one or more checkpoints and tabulate the metrics per mode."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .audio import MelSpectrogram
from .checkpoint import VocabularyMismatchError, load_checkpoint
from .data import compute_features, make_dataset
from .decoding import decode
from .metrics import METRIC_NAMES, MetricReport, evaluate_corpus
from .text import DatasetManifest, normalize_caption
from .training import evaluate_loss, model_from_checkpoint

ABLATION_ORDER = ("dual", "fusion_only", "high_only")


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class EvalRow:
    label: str
    mode: str
    report: MetricReport
    losses: dict[str, float]


@dataclass
class EvalTable:
    rows: list[EvalRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model"] + list(METRIC_NAMES))
        for row in self.rows:
            writer.writerow([row.label] + [f"{v:.6f}" for v in row.report.row()])
        return buf.getvalue()

    def losses_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "mode", "test_fused_loss", "test_nll"])
        for row in self.rows:
            writer.writerow([row.label, row.mode, f"{row.losses['fused']:.6f}", f"{row.losses['nll']:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(12, max(len(r.label) for r in self.rows))
        head = f"{'model':<{width}} " + " ".join(f"{m:>8}" for m in METRIC_NAMES) + f" {'test_nll':>9}"
        lines = [head, "-" * len(head)]
        for row in self.rows:
            vals = " ".join(f"{v:8.4f}" for v in row.report.row())
            lines.append(f"{row.label:<{width}} {vals} {row.losses['nll']:9.4f}")
        return "\n".join(lines)

    def items_jsonl(self) -> str:
        out = []
        for row in self.rows:
            for item in row.report.per_item:
                out.append(json.dumps({"model": row.label, **item}, sort_keys=True))
        return "\n".join(out) + "\n"

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(self.to_csv())
        (out_dir / "losses.csv").write_text(self.losses_csv())
        (out_dir / "metrics.txt").write_text(self.to_text() + "\n")
        (out_dir / "items.jsonl").write_text(self.items_jsonl())


def evaluate_checkpoints(checkpoints: Mapping[str, object], manifest: DatasetManifest,
                         mels: Optional[Sequence[MelSpectrogram]] = None, beam_size: Optional[int] = None,
                         l_max: int = 21) -> EvalTable:
    """Decode every test clip with each checkpoint; rows follow ``checkpoints`` order.

    All checkpoints must share one vocabulary. Each model decodes in the mode it
    was trained with.
    """
    if not manifest.items:
        raise ValueError("test manifest has no usable items")
    loaded = {label: load_checkpoint(path) for label, path in checkpoints.items()}
    hashes = {ck.vocab_hash for ck in loaded.values()}
    if len(hashes) > 1:
        raise VocabularyMismatchError("checkpoints were trained with different vocabularies")
    if mels is None:
        mels = compute_features(manifest)
    references = [[normalize_caption(r) for r in item.references] for item in manifest.items]
    clip_ids = [item.clip_id for item in manifest.items]

    rows = []
    for label, ckpt in loaded.items():
        model, vocab, config = model_from_checkpoint(ckpt)
        hyps = [vocab.decode(decode(model, m.frames, beam_size, l_max, config.mode)) for m in mels]
        data = make_dataset(manifest, vocab, list(mels), config.l_max)
        losses = evaluate_loss(model, data, config.mode)
        rows.append(EvalRow(label, config.mode, evaluate_corpus(hyps, references, clip_ids), losses))
    return EvalTable(rows)


def run_ablation_eval(checkpoints: Mapping[str, object], manifest: DatasetManifest,
                      mels: Optional[Sequence[MelSpectrogram]] = None, beam_size: Optional[int] = None) -> EvalTable:
    """The dual / fusion-only / high-only comparison table."""
    missing = [m for m in ABLATION_ORDER if checkpoints.get(m) is None or not Path(checkpoints[m]).is_file()]
    if missing:
        raise MissingCheckpointError(f"missing checkpoint for mode(s): {', '.join(missing)}")
    ordered = {m: checkpoints[m] for m in ABLATION_ORDER}
    return evaluate_checkpoints(ordered, manifest, mels, beam_size)

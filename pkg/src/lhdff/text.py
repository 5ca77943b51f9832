"""Caption normalization, vocabulary and Clotho-style CSV ingestion."""

from __future__ import annotations

import csv
import hashlib
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<sos>", "<eos>", "<unk>")
DEFAULT_L_MAX = 22

_DROP = re.compile(r"[^a-z0-9' ]")


class EmptyCaptionError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, drop characters outside ``[a-z0-9']`` and split on whitespace."""
    text = text.lower().replace("\t", " ").replace("\n", " ")
    return _DROP.sub("", text).split()


def normalize_caption(text: str) -> list[str]:
    tokens = tokenize(text)
    if not tokens:
        raise EmptyCaptionError(f"caption {text!r} is empty after normalization")
    return tokens


class Vocabulary:
    """Token/id bijection with ids 0-3 reserved for <pad>, <sos>, <eos>, <unk>."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to tokens, stopping at <eos> and skipping other reserved ids."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i >= len(RESERVED):
                out.append(self.itos[i])
        return out

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos[len(RESERVED):])

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        return cls([line for line in text.split("\n") if line])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def build_vocab(captions: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Vocabulary over tokenized training captions, ordered by frequency then lexicographically."""
    counts: Counter = Counter()
    n = 0
    for tokens in captions:
        counts.update(tokens)
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode_caption(tokens: Sequence[str], vocab: Vocabulary, l_max: int = DEFAULT_L_MAX) -> tuple[np.ndarray, bool]:
    """Return ``([<sos>, ids..., <eos>, <pad>...], truncated)`` with length ``l_max``."""
    if l_max < 3:
        raise ValueError("l_max must leave room for <sos>, one token and <eos>")
    truncated = len(tokens) > l_max - 2
    ids = [vocab.id(t) for t in tokens[: l_max - 2]]
    row = np.full(l_max, PAD, dtype=np.int64)
    row[0] = SOS
    row[1:1 + len(ids)] = ids
    row[1 + len(ids)] = EOS
    return row, truncated


@dataclass
class CaptionBatch:
    token_ids: np.ndarray  # B x L
    lengths: np.ndarray  # tokens including <sos> and <eos>
    vocab: Optional[Vocabulary] = None
    truncated: int = 0

    @classmethod
    def from_captions(cls, captions: Sequence[Sequence[str]], vocab: Vocabulary,
                      l_max: int = DEFAULT_L_MAX) -> "CaptionBatch":
        rows, n_trunc = [], 0
        for tokens in captions:
            row, trunc = encode_caption(tokens, vocab, l_max)
            rows.append(row)
            n_trunc += trunc
        if n_trunc:
            log.warning("%d caption(s) truncated to %d tokens", n_trunc, l_max - 2)
        ids = np.stack(rows)
        return cls(ids, (ids != PAD).sum(axis=1), vocab, n_trunc)

    def inputs(self) -> np.ndarray:
        """Teacher-forcing inputs ``[<sos>, w1..wn]``, trimmed to the longest row."""
        return self.token_ids[:, : int(self.lengths.max()) - 1]

    def targets(self) -> np.ndarray:
        return self.token_ids[:, 1: int(self.lengths.max())]


@dataclass
class ManifestItem:
    audio_path: Path
    references: list[str]

    @property
    def clip_id(self) -> str:
        return self.audio_path.stem


@dataclass
class DatasetManifest:
    items: list[ManifestItem]
    split: str = "train"
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def training_pairs(self) -> Iterator[tuple[ManifestItem, str]]:
        """One (clip, caption) pair per reference caption."""
        for item in self.items:
            for ref in item.references:
                yield item, ref


def _caption_columns(header: Sequence[str]) -> int:
    if not header or header[0] != "file_name":
        raise DatasetFormatError(f"expected header starting with 'file_name', got {header!r}")
    caps = list(header[1:])
    expected = [f"caption_{i}" for i in range(1, len(caps) + 1)]
    if not 1 <= len(caps) <= 5 or caps != expected:
        raise DatasetFormatError(f"expected columns caption_1..caption_k (k<=5), got {caps!r}")
    return len(caps)


def load_clotho_csv(csv_path, audio_dir, split: str = "train") -> DatasetManifest:
    """Parse ``file_name,caption_1,...,caption_k``; rows with missing audio land in ``skipped``."""
    csv_path, audio_dir = Path(csv_path), Path(audio_dir)
    items, skipped = [], []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        n_caps = _caption_columns(header or [])
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            name = row[0]
            refs = [c for c in row[1:1 + n_caps] if c.strip()]
            if len(refs) < n_caps:
                log.warning("%s:%d: %s has %d of %d captions", csv_path, lineno, name, len(refs), n_caps)
            path = audio_dir / name
            if not path.is_file():
                skipped.append(name)
                continue
            if not refs:
                skipped.append(name)
                continue
            items.append(ManifestItem(path, refs))
    return DatasetManifest(items, split, skipped)


def write_clotho_csv(path, rows: Sequence[tuple[str, Sequence[str]]], n_captions: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["file_name"] + [f"caption_{i}" for i in range(1, n_captions + 1)])
        for name, caps in rows:
            caps = list(caps) + [""] * (n_captions - len(caps))
            writer.writerow([name] + caps)

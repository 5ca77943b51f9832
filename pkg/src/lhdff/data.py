"""Turning manifests into in-memory (spectrogram, caption) training pairs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .audio import MelSpectrogram, load_lmel, load_wav, log_mel
from .text import DEFAULT_L_MAX, DatasetManifest, Vocabulary, build_vocab, encode_caption, normalize_caption


@dataclass
class CaptionDataset:
    mels: list[MelSpectrogram]
    references: list[list[list[str]]]  # tokenized references per clip
    pairs: list[tuple[int, np.ndarray]]  # (clip index, encoded caption row)
    truncated: int = 0

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def clip_ids(self) -> list[str]:
        return [m.source_id for m in self.mels]

    def subset(self, clip_indices: Sequence[int]) -> "CaptionDataset":
        keep = list(clip_indices)
        remap = {old: new for new, old in enumerate(keep)}
        pairs = [(remap[c], row) for c, row in self.pairs if c in remap]
        return CaptionDataset([self.mels[i] for i in keep], [self.references[i] for i in keep], pairs)


def compute_features(manifest: DatasetManifest, cache_dir: Optional[Path] = None) -> list[MelSpectrogram]:
    """Log-mel features for every manifest item, read from ``<cache_dir>/<clip>.lmel`` when present."""
    mels = []
    for item in manifest.items:
        cached = Path(cache_dir) / f"{item.clip_id}.lmel" if cache_dir else None
        if cached is not None and cached.is_file():
            mels.append(load_lmel(cached, source_id=item.clip_id))
        else:
            mels.append(log_mel(load_wav(item.audio_path)))
    return mels


def vocab_from_manifest(manifest: DatasetManifest, min_count: int = 1) -> Vocabulary:
    if manifest.split != "train":
        raise ValueError("vocabularies are built from the training split only")
    return build_vocab((normalize_caption(ref) for _, ref in manifest.training_pairs()), min_count)


def make_dataset(manifest: DatasetManifest, vocab: Vocabulary, mels: Optional[list[MelSpectrogram]] = None,
                 l_max: int = DEFAULT_L_MAX) -> CaptionDataset:
    if mels is None:
        mels = compute_features(manifest)
    refs, pairs, truncated = [], [], 0
    for idx, item in enumerate(manifest.items):
        tokenized = [normalize_caption(r) for r in item.references]
        refs.append(tokenized)
        for tokens in tokenized:
            row, trunc = encode_caption(tokens, vocab, l_max)
            truncated += trunc
            pairs.append((idx, row))
    return CaptionDataset(list(mels), refs, pairs, truncated)

"""The full captioning model: RPANNs encoder feeding two decoders over a shared embedding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core.nn import Dropout, Module
from ..core.tensor import Tensor
from .decoder import FusedDistribution, TransformerDecoder, WordEmbedding, fuse, sinusoidal_positions
from .encoder import EncoderOutput, RPANNsEncoder

MODES = ("dual", "fusion_only", "high_only")
MAX_POSITIONS = 256


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 512
    dropout: float = 0.1
    n_mels: int = 64


def check_mode(mode: str) -> str:
    mode = mode.replace("-", "_")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    return mode


class LHDFF(Module):
    """``td_fusion`` (TD1) reads x_fusion, ``td_high`` (TD2) reads x_high.

    ``mode`` picks which decoders contribute: both ("dual"), only TD1
    ("fusion_only") or only TD2 on x_high ("high_only").
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.encoder = RPANNsEncoder(rng, config.d_model, config.n_mels)
        self.embedding = WordEmbedding(config.vocab_size, config.d_model, rng)
        self.td_fusion = TransformerDecoder(config.vocab_size, rng, config.d_model, config.n_heads,
                                            config.n_layers, config.d_ff, config.dropout)
        self.td_high = TransformerDecoder(config.vocab_size, rng, config.d_model, config.n_heads,
                                          config.n_layers, config.d_ff, config.dropout)
        self.embed_drop = Dropout(config.dropout)
        self._positions = sinusoidal_positions(MAX_POSITIONS, config.d_model)

    def set_dropout_rng(self, rng: Optional[np.random.Generator]) -> None:
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def encode(self, mel: np.ndarray, lengths: Optional[np.ndarray] = None, mode: str = "dual",
               keep_intermediates: bool = False) -> EncoderOutput:
        with_low = check_mode(mode) != "high_only"
        return self.encoder(mel, lengths, keep_intermediates=keep_intermediates, with_low=with_low)

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.shape[1] > MAX_POSITIONS:
            raise ValueError(f"sequences longer than {MAX_POSITIONS} tokens are not supported")
        x = self.embedding(tokens)
        x = x + self._positions[: tokens.shape[1]].astype(x.dtype)
        return self.embed_drop(x)

    def decode(self, tokens: np.ndarray, memory: EncoderOutput, mode: str = "dual") -> FusedDistribution:
        """Fused log-distribution for every prefix position of ``tokens`` (``B x L``)."""
        mode = check_mode(mode)
        x = self.embed(tokens)
        logits1 = logits2 = None
        if mode in ("dual", "fusion_only"):
            logits1 = self.td_fusion(x, memory.x_fusion, memory.mask)
        if mode in ("dual", "high_only"):
            logits2 = self.td_high(x, memory.x_high, memory.mask)
        return fuse(logits1, logits2)

    def forward(self, mel: np.ndarray, lengths: Optional[np.ndarray], tokens: np.ndarray,
                mode: str = "dual") -> FusedDistribution:
        return self.decode(tokens, self.encode(mel, lengths, mode), mode)

    def count_parameters(self) -> "ParameterReport":
        rows = [(name, p.shape, int(p.size)) for name, p in self.named_parameters()]
        return ParameterReport(rows)


@dataclass
class ParameterReport:
    rows: list[tuple[str, tuple, int]]

    def count(self, prefix: str) -> int:
        return sum(n for name, _, n in self.rows if name.startswith(prefix))

    @property
    def encoder_total(self) -> int:
        return self.count("encoder.")

    @property
    def decoder_total(self) -> int:
        return self.total - self.encoder_total

    @property
    def total(self) -> int:
        return sum(n for _, _, n in self.rows)

    def format(self) -> str:
        width = max(len(r[0]) for r in self.rows)
        lines = [f"{name:<{width}}  {str(shape):<20} {n:>10,}" for name, shape, n in self.rows]
        lines.append(f"{'encoder total':<{width}}  {'':<20} {self.encoder_total:>10,}")
        lines.append(f"{'decoder total':<{width}}  {'':<20} {self.decoder_total:>10,}")
        lines.append(f"{'total':<{width}}  {'':<20} {self.total:>10,}")
        return "\n".join(lines)

"""Transformer decoders, vocabulary heads and log-probability fusion."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import functional as F
from ..core.nn import Dropout, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from ..core.tensor import Tensor, get_default_dtype
from ..text import PAD

WEMB_MAGIC = b"WEMB"
WEMB_VERSION = 1
_WEMB_HEADER = struct.Struct("<4sHII")

EMBEDDING_MODES = ("frozen", "trainable", "imported")


class EmbeddingConfigError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate)
    return table


class WordEmbedding(Module):
    """``V x d`` lookup table; frozen by default, scaled by sqrt(d) on lookup."""

    def __init__(self, vocab_size: int, d: int, rng: np.random.Generator, mode: str = "frozen"):
        super().__init__()
        table = rng.normal(0.0, 1.0 / np.sqrt(d), size=(vocab_size, d)).astype(get_default_dtype())
        self.weight = Parameter(table)
        self.mode = "trainable"
        self.set_mode(mode)

    def set_mode(self, mode: str, table_path=None) -> None:
        if mode not in EMBEDDING_MODES:
            raise EmbeddingConfigError(f"embedding mode must be one of {EMBEDDING_MODES}")
        if mode == "imported":
            if table_path is None:
                raise EmbeddingConfigError("imported mode needs an embedding table file")
            table = load_embedding_table(table_path)
            if table.shape != self.weight.shape:
                raise EmbeddingConfigError(
                    f"embedding table is {table.shape[0]}x{table.shape[1]}, model needs "
                    f"{self.weight.shape[0]}x{self.weight.shape[1]}")
            self.weight.data = table.astype(self.weight.dtype)
        self.mode = mode
        self.weight.requires_grad = mode == "trainable"
        self.weight.grad = None

    def forward(self, ids: np.ndarray) -> Tensor:
        return F.embedding(ids, self.weight) * float(np.sqrt(self.weight.shape[1]))


def save_embedding_table(path, table: np.ndarray) -> None:
    table = np.ascontiguousarray(table, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_WEMB_HEADER.pack(WEMB_MAGIC, WEMB_VERSION, table.shape[0], table.shape[1]))
        fh.write(table.tobytes())


def load_embedding_table(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _WEMB_HEADER.size:
        raise EmbeddingConfigError(f"{path}: truncated WEMB header")
    magic, version, v, d = _WEMB_HEADER.unpack_from(blob)
    if magic != WEMB_MAGIC or version != WEMB_VERSION:
        raise EmbeddingConfigError(f"{path}: not a WEMB v{WEMB_VERSION} file")
    payload = blob[_WEMB_HEADER.size:]
    if len(payload) != 4 * v * d:
        raise EmbeddingConfigError(f"{path}: payload size does not match {v}x{d}")
    return np.frombuffer(payload, dtype="<f4").reshape(v, d).copy()


class DecoderLayer(Module):
    """Post-norm layer: masked self-attention, cross-attention, feed-forward."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float, rng: np.random.Generator):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.cross_attn = MultiHeadAttention(d_model, n_heads, rng)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)
        self.norm1 = LayerNorm(d_model)
        self.norm2 = LayerNorm(d_model)
        self.norm3 = LayerNorm(d_model)
        self.drop1 = Dropout(dropout)
        self.drop2 = Dropout(dropout)
        self.drop3 = Dropout(dropout)
        self.drop_ff = Dropout(dropout)

    def forward(self, x: Tensor, memory: Tensor, causal: np.ndarray, memory_mask: np.ndarray) -> Tensor:
        x = self.norm1(x + self.drop1(self.self_attn(x, x, x, causal)))
        x = self.norm2(x + self.drop2(self.cross_attn(x, memory, memory, memory_mask)))
        hidden = self.drop_ff(F.relu(self.ff1(x)))
        return self.norm3(x + self.drop3(self.ff2(hidden)))


class TransformerDecoder(Module):
    """A decoder stack followed by its vocabulary head."""

    def __init__(self, vocab_size: int, rng: np.random.Generator, d_model: int = 128, n_heads: int = 4,
                 n_layers: int = 2, d_ff: int = 512, dropout: float = 0.1):
        super().__init__()
        self.layers = [DecoderLayer(d_model, n_heads, d_ff, dropout, rng) for _ in range(n_layers)]
        self.head = Linear(d_model, vocab_size, rng)

    def forward(self, x: Tensor, memory: Tensor, memory_mask: Optional[np.ndarray] = None) -> Tensor:
        """Vocabulary logits ``B x L x m`` for embedded tokens ``x`` (``B x L x d``)."""
        length = x.shape[1]
        causal = np.tril(np.ones((length, length), dtype=bool))[None, None]
        if memory_mask is None:
            memory_mask = np.ones(memory.shape[:2], dtype=bool)
        mem_mask = memory_mask[:, None, None, :]
        for layer in self.layers:
            x = layer(x, memory, causal, mem_mask)
        return self.head(x)


@dataclass
class FusedDistribution:
    """Log-domain scores ``B x L x m``; ``p_fusion`` is the unnormalized sum of the branches."""

    p_fusion: Tensor
    p_td1: Optional[Tensor] = None
    p_td2: Optional[Tensor] = None


def fuse(logits_td1: Optional[Tensor], logits_td2: Optional[Tensor]) -> FusedDistribution:
    """Log-softmax each branch and add them; a missing branch drops out of the sum."""
    p1 = F.log_softmax(logits_td1) if logits_td1 is not None else None
    p2 = F.log_softmax(logits_td2) if logits_td2 is not None else None
    if p1 is not None and p2 is not None:
        fused = p1 + p2
    else:
        fused = p1 if p1 is not None else p2
    return FusedDistribution(fused, p1, p2)


def masked_nll(log_probs: Tensor, targets: np.ndarray) -> Tensor:
    """``-(1/T_tok) * sum log_probs[t, y_t]`` over non-pad targets."""
    targets = np.asarray(targets)
    valid = targets != PAD
    n_tok = int(valid.sum())
    if n_tok == 0:
        raise DegenerateBatchError("every target position is padding")
    picked = F.pick(log_probs, np.where(valid, targets, 0))
    weights = Tensor(valid.astype(log_probs.dtype) * (-1.0 / n_tok), dtype=log_probs.dtype)
    return F.sum(picked * weights)


def fused_ce_loss(dist: FusedDistribution, targets: np.ndarray) -> Tensor:
    return masked_nll(dist.p_fusion, targets)

"""Greedy and beam-search caption generation over fused log-scores."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core.tensor import Tensor
from .model import LHDFF, EncoderOutput
from .text import EOS, SOS

# maps a list of prefixes (each starting with <sos>) to an (n_prefixes x m) array of next-token scores
StepFn = Callable[[Sequence[Sequence[int]]], np.ndarray]


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)  # without <sos>/<eos>
    score: float = 0.0
    finished: bool = False
    length: int = 0  # number of scored steps (includes a final <eos>)

    def normalized(self, alpha: float) -> float:
        return self.score / max(self.length, 1) ** alpha if alpha else self.score


def _repeat(t: Tensor, n: int) -> Tensor:
    return Tensor(np.repeat(t.data, n, axis=0), dtype=t.dtype)


def model_step_fn(model: LHDFF, mel: np.ndarray, mode: str = "dual") -> StepFn:
    """Encode ``mel`` once and return a step function over fused next-token scores."""
    model.eval()
    mel = np.asarray(mel)
    memory = model.encode(mel[None] if mel.ndim == 2 else mel, mode=mode)

    def step(prefixes):
        tokens = np.asarray(prefixes, dtype=np.int64)
        n = tokens.shape[0]
        mem = memory if n == 1 else EncoderOutput(_repeat(memory.x_fusion, n), _repeat(memory.x_high, n),
                                                  np.repeat(memory.mask, n, axis=0))
        dist = model.decode(tokens, mem, mode)
        return dist.p_fusion.data[:, -1, :].astype(np.float64)

    return step


def greedy_search(step: StepFn, l_max: int) -> Hypothesis:
    hyp = Hypothesis()
    prefix = [SOS]
    for _ in range(l_max):
        scores = step([prefix])[0]
        word = int(np.argmax(scores))
        hyp.score += float(scores[word])
        hyp.length += 1
        if word == EOS:
            hyp.finished = True
            break
        hyp.tokens.append(word)
        prefix.append(word)
    else:
        hyp.finished = True
    return hyp


def beam_search(step: StepFn, beam_size: int, l_max: int, alpha: float = 0.0) -> Hypothesis:
    """Beam search on cumulative scores; finished hypotheses are ranked by ``score / len**alpha``.

    Ties are broken by beam order, then by token id, so ``beam_size=1``
    follows exactly the same path as :func:`greedy_search`.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    alive = [Hypothesis()]
    finished: list[Hypothesis] = []
    for _ in range(l_max):
        scores = step([[SOS] + h.tokens for h in alive])
        candidates = []
        for b, hyp in enumerate(alive):
            row = scores[b]
            top = np.argsort(-row, kind="stable")[:beam_size]
            for word in top:
                candidates.append((hyp.score + float(row[word]), b, int(word)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        alive_next = []
        for total, b, word in candidates[:beam_size]:
            parent = alive[b]
            if word == EOS:
                finished.append(Hypothesis(list(parent.tokens), total, True, parent.length + 1))
            else:
                alive_next.append(Hypothesis(parent.tokens + [word], total, False, parent.length + 1))
        alive = alive_next
        if not alive or len(finished) >= beam_size:
            break
    for hyp in alive:
        hyp.finished = True
    pool = finished if len(finished) >= beam_size else finished + alive
    best = max(range(len(pool)), key=lambda i: (pool[i].normalized(alpha), -i))
    return pool[best]


def greedy_decode(model: LHDFF, mel: np.ndarray, l_max: int = 21, mode: str = "dual") -> list[int]:
    return greedy_search(model_step_fn(model, mel, mode), l_max).tokens


def beam_decode(model: LHDFF, mel: np.ndarray, beam_size: int = 3, l_max: int = 21, mode: str = "dual",
                alpha: float = 0.0) -> list[int]:
    return beam_search(model_step_fn(model, mel, mode), beam_size, l_max, alpha).tokens


def decode(model: LHDFF, mel: np.ndarray, beam_size: Optional[int] = None, l_max: int = 21,
           mode: str = "dual") -> list[int]:
    if beam_size is None:
        return greedy_decode(model, mel, l_max, mode)
    return beam_decode(model, mel, beam_size, l_max, mode)

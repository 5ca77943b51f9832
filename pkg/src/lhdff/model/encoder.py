"""RPANNs: a CNN10-style encoder that also taps block 3 as a low-dimensional shortcut."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import functional as F
from ..core.nn import BatchNorm2d, Conv2d, Linear, Module
from ..core.tensor import Tensor

CHANNELS = (64, 128, 256, 512)
MIN_FRAMES = 16


class InputTooShortError(ValueError):
    pass


def pooled_length(n: int, times: int) -> int:
    for _ in range(times):
        n //= 2
    return n


@dataclass
class EncoderOutput:
    x_fusion: Tensor  # B x T x d
    x_high: Tensor  # B x T x d
    mask: np.ndarray  # B x T, True for frames backed by real audio
    x_low: Optional[Tensor] = None  # B x T x d after time alignment
    x_3: Optional[Tensor] = None  # B x T' x 256, before projection
    x_final: Optional[Tensor] = None  # B x T x 1024


class ConvBlock(Module):
    """conv-BN-ReLU twice, then 2x2 average pooling."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv2d(c_in, c_out, rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, rng)
        self.bn2 = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.bn1(self.conv1(x)))
        x = F.relu(self.bn2(self.conv2(x)))
        return F.avg_pool2d(x)


def align_time(x_low: Tensor, target: int) -> Tensor:
    """Bring a ``B x T' x d`` sequence to ``B x target x d``.

    Longer inputs are mean-pooled over pairs of frames first; whatever length
    mismatch remains is fixed by truncating or appending zero frames.
    """
    b, t_src, d = x_low.shape
    x = x_low
    if t_src > target:
        half = t_src // 2
        if half >= 1:
            x = F.mean(F.reshape(x[:, : half * 2], (b, half, 2, d)), axis=2)
        t_src = x.shape[1]
    if t_src > target:
        x = x[:, :target]
    elif t_src < target:
        zeros = Tensor(np.zeros((b, target - t_src, d), dtype=x.dtype), dtype=x.dtype)
        x = F.concat([x, zeros], axis=1)
    return x


class RPANNsEncoder(Module):
    def __init__(self, rng: np.random.Generator, d_model: int = 128, n_mels: int = 64):
        super().__init__()
        self.n_mels = n_mels
        chans = (1,) + CHANNELS
        self.blocks = [ConvBlock(chans[i], chans[i + 1], rng) for i in range(4)]
        self.fc_final = Linear(CHANNELS[3], 1024, rng)  # f_1024
        self.proj_high = Linear(1024, d_model, rng)  # f_128 on x_final
        self.proj_low = Linear(CHANNELS[2], d_model, rng)  # f_128 on x_3
        self.use_low = True

    def forward(self, mel: np.ndarray, lengths: Optional[np.ndarray] = None, keep_intermediates: bool = False,
                with_low: bool = True) -> EncoderOutput:
        """Encode a ``B x T_in x n_mels`` log-mel batch."""
        mel = np.asarray(mel)
        if mel.ndim == 2:
            mel = mel[None]
        b, t_in, n_mels = mel.shape
        if t_in < MIN_FRAMES:
            raise InputTooShortError(f"need at least {MIN_FRAMES} mel frames, got {t_in}")
        if n_mels != self.n_mels:
            raise ValueError(f"expected {self.n_mels} mel bins, got {n_mels}")
        if lengths is None:
            lengths = np.full(b, t_in)

        x = Tensor(mel[:, None, :, :].astype(self.fc_final.weight.dtype, copy=False))
        for i in range(3):
            x = self.blocks[i](x)
        x_3 = F.mean(x, axis=3).transpose(0, 2, 1)  # B x T' x 256
        x = self.blocks[3](x)
        pooled = F.mean(x, axis=3).transpose(0, 2, 1)  # B x T x 512
        x_final = self.fc_final(pooled)
        x_high = F.relu(self.proj_high(x_final))
        t = x_high.shape[1]

        x_low = None
        if with_low and self.use_low:
            x_low = align_time(F.relu(self.proj_low(x_3)), t)
            x_fusion = x_high + x_low
        else:
            x_fusion = x_high

        valid = np.maximum(np.array([pooled_length(int(n), 4) for n in lengths]), 1)
        mask = np.arange(t)[None, :] < valid[:, None]
        if keep_intermediates:
            return EncoderOutput(x_fusion, x_high, mask, x_low, x_3, x_final)
        return EncoderOutput(x_fusion, x_high, mask)

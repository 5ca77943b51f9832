"""WAV ingestion, log-mel features and SpecAugment-style masking."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

N_FFT = 1024
HOP = 512
N_MELS = 64
MEL_EPS = 1e-10
FMIN = 50.0
LOG_FLOOR = float(np.log(MEL_EPS))

LMEL_MAGIC = b"LMEL"
LMEL_VERSION = 1
_LMEL_HEADER = struct.Struct("<4sHII")


class AudioFormatError(ValueError):
    """Unsupported or malformed audio container/codec."""


class AudioIOError(OSError):
    """Audio file is truncated or unreadable."""


class ClipTooShortError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # T_in x n_mels, natural-log magnitude
    frame_rate: float
    source_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class MelBatch:
    """Time-padded batch of spectrograms; ``lengths`` holds each item's true frame count."""

    data: np.ndarray  # B x T_max x n_mels
    lengths: np.ndarray
    source_ids: list[str] = field(default_factory=list)

    @classmethod
    def from_mels(cls, mels: Sequence[MelSpectrogram | np.ndarray]) -> "MelBatch":
        arrays = [m.frames if isinstance(m, MelSpectrogram) else np.asarray(m) for m in mels]
        ids = [m.source_id if isinstance(m, MelSpectrogram) else "" for m in mels]
        t_max = max(a.shape[0] for a in arrays)
        data = np.zeros((len(arrays), t_max, arrays[0].shape[1]), dtype=np.float32)
        for i, a in enumerate(arrays):
            data[i, : a.shape[0]] = a
        return cls(data, np.array([a.shape[0] for a in arrays], dtype=np.int64), ids)

    def frame_mask(self) -> np.ndarray:
        return np.arange(self.data.shape[1])[None, :] < self.lengths[:, None]


# ---------------------------------------------------------------- WAV

def load_wav(path) -> AudioClip:
    """Read a 16-bit PCM RIFF/WAVE file; multi-channel audio is averaged to mono."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except wave.Error as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    except EOFError as exc:
        raise AudioIOError(f"{path}: truncated header") from exc
    if width != 2:
        raise AudioFormatError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    expected = n_frames * channels * width
    if len(raw) < expected:
        raise AudioIOError(f"{path}: truncated data ({len(raw)} of {expected} bytes)")
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return AudioClip(pcm, rate, path.stem)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- features

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(sample_rate: int, n_mels: int = N_MELS, fmin: float = FMIN) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz): left edge, centres, right edge, equally spaced in HTK mel."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(sample_rate / 2), n_mels + 2))


def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_mels: int = N_MELS, fmin: float = FMIN) -> np.ndarray:
    """Triangular filters (``n_mels x (n_fft//2 + 1)``), each scaled to unit area."""
    edges = mel_band_edges(sample_rate, n_mels, fmin)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return weights * (2.0 / (hi - lo))


def n_frames_for(n_samples: int, n_fft: int = N_FFT, hop: int = HOP) -> int:
    if n_samples < n_fft:
        raise ClipTooShortError(f"clip has {n_samples} samples, fewer than one {n_fft}-point window")
    return 1 + (n_samples - n_fft) // hop


def stft_magnitude(samples: np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """|STFT| with a periodic Hann window and no edge padding (``T_in x (n_fft//2+1)``)."""
    samples = np.asarray(samples, dtype=np.float64)
    n = n_frames_for(len(samples), n_fft, hop)
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft)
    frames = np.lib.stride_tricks.sliding_window_view(samples, n_fft)[::hop][:n]
    return np.abs(np.fft.rfft(frames * window, axis=1))


def log_mel(clip: AudioClip, n_fft: int = N_FFT, hop: int = HOP, n_mels: int = N_MELS) -> MelSpectrogram:
    mag = stft_magnitude(clip.samples, n_fft, hop)
    mel = mag @ mel_filterbank(clip.sample_rate, n_fft, n_mels).T
    frames = np.log(mel + MEL_EPS).astype(np.float32)
    return MelSpectrogram(frames, clip.sample_rate / hop, clip.source_id)


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    n_time_masks: int = 2
    time_width: int = 64
    n_freq_masks: int = 2
    freq_width: int = 8
    variant: str = "zero"  # "zero" or "mixture"
    fill: float = LOG_FLOOR

    def max_masked_cells(self, n_frames: int, n_bins: int) -> int:
        t = min(self.time_width, n_frames) * self.n_time_masks * n_bins
        f = min(self.freq_width, n_bins) * self.n_freq_masks * n_frames
        return t + f


def draw_masks(shape: tuple, rng: np.random.Generator, policy: AugmentPolicy) -> np.ndarray:
    """Boolean ``T x F`` array of cells to overwrite; widths larger than the extent are clipped."""
    n_t, n_f = shape
    mask = np.zeros(shape, dtype=bool)
    for _ in range(policy.n_time_masks):
        width = min(int(rng.integers(0, policy.time_width + 1)), n_t)
        start = int(rng.integers(0, n_t - width + 1))
        mask[start:start + width, :] = True
    for _ in range(policy.n_freq_masks):
        width = min(int(rng.integers(0, policy.freq_width + 1)), n_f)
        start = int(rng.integers(0, n_f - width + 1))
        mask[:, start:start + width] = True
    return mask


def apply_mask(mel: MelSpectrogram, mask: np.ndarray, policy: AugmentPolicy = AugmentPolicy(),
               donor: Optional[MelSpectrogram] = None) -> MelSpectrogram:
    """Overwrite the ``mask`` cells with the fill value ("zero") or the donor's cells ("mixture").

    Donor cells past the donor's length get the fill value; cells outside the
    mask are returned untouched.
    """
    frames = mel.frames
    out = frames.copy()
    if policy.variant == "mixture":
        if donor is None:
            raise ValueError("mixture masking needs a donor spectrogram")
        source = np.full_like(frames, policy.fill)
        n = min(donor.frames.shape[0], frames.shape[0])
        source[:n] = donor.frames[:n]
        out[mask] = source[mask]
    elif policy.variant == "zero":
        out[mask] = policy.fill
    else:
        raise ValueError(f"unknown augmentation variant {policy.variant!r}")
    return replace(mel, frames=out)


def spec_augment(
    mel: MelSpectrogram,
    rng: np.random.Generator,
    policy: AugmentPolicy = AugmentPolicy(),
    donor: Optional[MelSpectrogram] = None,
    return_mask: bool = False,
):
    """Mask random time and frequency bands of one spectrogram (see :func:`apply_mask`)."""
    mask = draw_masks(mel.frames.shape, rng, policy)
    result = apply_mask(mel, mask, policy, donor)
    return (result, mask) if return_mask else result


def augment_batch(
    mels: Sequence[MelSpectrogram],
    rng: np.random.Generator,
    policy: AugmentPolicy = AugmentPolicy(),
    mixture_prob: float = 0.5,
) -> list[MelSpectrogram]:
    """Augment a mini-batch; one variant is drawn per batch, mixture donors by permutation."""
    variant = "mixture" if rng.random() < mixture_prob else "zero"
    policy = replace(policy, variant=variant)
    donors = rng.permutation(len(mels))
    return [spec_augment(m, rng, policy, donor=mels[d]) for m, d in zip(mels, donors)]


# ---------------------------------------------------------------- cache

def save_lmel(path, mel: MelSpectrogram) -> None:
    frames = np.ascontiguousarray(mel.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_LMEL_HEADER.pack(LMEL_MAGIC, LMEL_VERSION, frames.shape[0], frames.shape[1]))
        fh.write(frames.tobytes())


def load_lmel(path, frame_rate: float = 0.0, source_id: Optional[str] = None) -> MelSpectrogram:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _LMEL_HEADER.size:
        raise AudioIOError(f"{path}: truncated LMEL header")
    magic, version, t_in, n_mels = _LMEL_HEADER.unpack_from(blob)
    if magic != LMEL_MAGIC:
        raise AudioFormatError(f"{path}: bad magic {magic!r}")
    if version != LMEL_VERSION:
        raise AudioFormatError(f"{path}: unsupported LMEL version {version}")
    payload = blob[_LMEL_HEADER.size:]
    if len(payload) != 4 * t_in * n_mels:
        raise AudioIOError(f"{path}: payload holds {len(payload)} bytes, expected {4 * t_in * n_mels}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t_in, n_mels).astype(np.float32)
    return MelSpectrogram(frames, frame_rate, path.stem if source_id is None else source_id)

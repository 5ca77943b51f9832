"""Synthetic micro-datasets: tone/noise clips with template captions."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .audio import write_wav
from .text import write_clotho_csv

SAMPLE_RATE = 16000
DURATION = 1.5

# (kind, qualifier) -> (caption phrase, synthesis parameter)
EVENTS = {
    ("tone", "low"): ("a low tone", 300.0),
    ("tone", "mid"): ("a medium tone", 1000.0),
    ("tone", "high"): ("a high tone", 3200.0),
    ("noise", "loud"): ("loud noise", 0.5),
    ("noise", "soft"): ("soft noise", 0.08),
}
EVENT_KEYS = sorted(EVENTS)


def caption_for(events) -> str:
    return " then ".join(EVENTS[e][0] for e in events)


def _render(events, rng: np.random.Generator, sample_rate: int, duration: float) -> np.ndarray:
    n = int(round(sample_rate * duration))
    out = 0.002 * rng.standard_normal(n)
    edges = np.linspace(0, n, len(events) + 1).astype(int)
    for (kind, qual), lo, hi in zip(events, edges[:-1], edges[1:]):
        t = np.arange(hi - lo) / sample_rate
        ramp = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.01)
        param = EVENTS[(kind, qual)][1]
        if kind == "tone":
            freq = param * (1.0 + 0.03 * rng.uniform(-1, 1))
            out[lo:hi] += 0.4 * ramp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
        else:
            out[lo:hi] += param * ramp * rng.standard_normal(hi - lo)
    return np.clip(out, -1.0, 32767 / 32768)


def draw_event_sequences(rng: np.random.Generator, n_items: int, max_events: int = 2) -> list[tuple]:
    """Distinct event sequences while the grammar has unused ones, then repeats."""
    pool = [(e,) for e in EVENT_KEYS]
    if max_events >= 2:
        pool += [(a, b) for a in EVENT_KEYS for b in EVENT_KEYS if a != b]
    order = rng.permutation(len(pool))
    return [pool[order[i % len(pool)]] for i in range(n_items)]


def generate_micro_dataset(seed: int, n_items: int, out_dir, sample_rate: int = SAMPLE_RATE,
                           duration: float = DURATION) -> Path:
    """Write ``n_items`` WAV clips plus ``captions.csv`` under ``out_dir``; returns the CSV path.

    Same seed gives byte-identical files.
    """
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i, events in enumerate(draw_event_sequences(rng, n_items)):
        name = f"clip_{i:03d}.wav"
        write_wav(out_dir / name, _render(events, rng, sample_rate, duration), sample_rate)
        rows.append((name, [caption_for(events)]))
    csv_path = out_dir / "captions.csv"
    write_clotho_csv(csv_path, rows, n_captions=1)
    return csv_path

"""Central finite-difference oracles for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradientTape, Tensor


def relative_error(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def analytic_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    with GradientTape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def numeric_grads(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> list[np.ndarray]:
    """Coordinate-wise central differences of the scalar ``fn()``."""
    out = []
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        out.append(g)
    return out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences over all coordinates."""
    analytic = analytic_grads(fn, inputs)
    numeric = numeric_grads(fn, inputs, step)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def check_directional(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    step: float = 1e-5,
) -> float:
    """Compare ``grad . v`` with a central difference along a random direction ``v``.

    Two forward passes check every coordinate at once, which makes the test
    affordable for a whole model.
    """
    analytic = analytic_grads(fn, inputs)
    directions = [rng.standard_normal(t.shape).astype(t.dtype) for t in inputs]
    predicted = sum(float(np.sum(a * d, dtype=np.float64)) for a, d in zip(analytic, directions))
    originals = [t.data.copy() for t in inputs]
    for t, o, d in zip(inputs, originals, directions):
        t.data = o + step * d
    up = fn().item()
    for t, o, d in zip(inputs, originals, directions):
        t.data = o - step * d
    down = fn().item()
    for t, o in zip(inputs, originals):
        t.data = o
    measured = (up - down) / (2 * step)
    return relative_error(predicted, measured)


def check_sampled(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    per_input: int = 1,
    steps: Sequence[float] = (1e-6, 1e-7, 1e-8),
    floor: float = 1e-3,
) -> float:
    """Central differences on ``per_input`` random coordinates of every input.

    Each coordinate is probed at every step size and the best agreement is
    kept: a wrong gradient disagrees at all of them, while a ReLU kink lying
    within one step of the point only spoils the larger steps. ``floor`` turns
    the check absolute for gradients smaller than it.
    """
    analytic = analytic_grads(fn, inputs)
    worst = 0.0
    for t, a in zip(inputs, analytic):
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_input, flat.size), replace=False):
            orig = flat[i]
            errs = []
            for h in steps:
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                errs.append(relative_error(a.reshape(-1)[i], (up - down) / (2 * h), floor))
                if errs[-1] <= 1e-6:
                    break
            worst = max(worst, min(errs))
    return worst

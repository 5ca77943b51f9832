"""Built-in verification battery behind ``lhdff selftest``."""

from __future__ import annotations

import time
import traceback
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import metrics, oracles
from .core import GradientTape, Tensor, float64_mode
from .core import functional as F
from .core.gradcheck import check_gradients, check_sampled
from .model import LHDFF, ModelConfig, fuse, fused_ce_loss, masked_nll, pooled_length
from .training import lr_at

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _param(rng, shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)


def op_cases(rng) -> dict[str, Callable]:
    """Small gradient-check problems, one per differentiable op. Call inside float64 mode."""

    def case_relu():
        x = _param(rng, (3, 4))
        w = rng.uniform(-1, 1, x.shape)
        return (lambda: F.sum(F.relu(x) * Tensor(w))), [x]

    def case_linear():
        x, w, b = _param(rng, (2, 3, 4)), _param(rng, (5, 4)), _param(rng, (5,))
        wt = rng.uniform(-1, 1, (2, 3, 5))
        return (lambda: F.sum(F.linear(x, w, b) * Tensor(wt))), [x, w, b]

    def case_conv2d():
        x, w, b = _param(rng, (2, 2, 4, 5)), _param(rng, (3, 2, 3, 3)), _param(rng, (3,))
        wt = rng.uniform(-1, 1, (2, 3, 4, 5))
        return (lambda: F.sum(F.conv2d(x, w, b) * Tensor(wt))), [x, w, b]

    def case_batch_norm2d():
        x, g, b = _param(rng, (2, 3, 3, 2)), _param(rng, (3,)), _param(rng, (3,))
        wt = rng.uniform(-1, 1, x.shape)

        def fn():
            rm, rv = np.zeros(3), np.ones(3)
            return F.sum(F.batch_norm2d(x, g, b, rm, rv, True) * Tensor(wt))
        return fn, [x, g, b]

    def case_avg_pool2d():
        x = _param(rng, (1, 2, 5, 4))
        wt = rng.uniform(-1, 1, (1, 2, 2, 2))
        return (lambda: F.sum(F.avg_pool2d(x) * Tensor(wt))), [x]

    def case_log_softmax():
        x = _param(rng, (3, 6))
        wt = rng.uniform(-1, 1, x.shape)
        return (lambda: F.sum(F.log_softmax(x) * Tensor(wt))), [x]

    def case_layer_norm():
        x, g, b = _param(rng, (2, 3, 6)), _param(rng, (6,)), _param(rng, (6,))
        wt = rng.uniform(-1, 1, x.shape)
        return (lambda: F.sum(F.layer_norm(x, g, b) * Tensor(wt))), [x, g, b]

    def case_attention():
        q, k, v = _param(rng, (2, 2, 3, 4)), _param(rng, (2, 2, 5, 4)), _param(rng, (2, 2, 5, 4))
        mask = rng.random((2, 1, 3, 5)) < 0.7
        mask[..., 0] = True
        wt = rng.uniform(-1, 1, (2, 2, 3, 4))
        return (lambda: F.sum(F.scaled_dot_product_attention(q, k, v, mask)[0] * Tensor(wt))), [q, k, v]

    def case_embedding():
        w = _param(rng, (7, 4))
        ids = rng.integers(0, 7, (3, 5))
        wt = rng.uniform(-1, 1, (3, 5, 4))
        return (lambda: F.sum(F.embedding(ids, w) * Tensor(wt))), [w]

    def case_fused_loss():
        a, b = _param(rng, (2, 4, 6)), _param(rng, (2, 4, 6))
        y = rng.integers(0, 6, (2, 4))
        y[0, -1] = 0
        return (lambda: fused_ce_loss(fuse(a, b), y)), [a, b]

    def case_mean_matmul_reshape():
        a, b = _param(rng, (2, 3, 4)), _param(rng, (4, 5))
        wt = rng.uniform(-1, 1, (2, 5))
        return (lambda: F.sum(F.mean(F.matmul(a, b), axis=1) * Tensor(wt))), [a, b]

    return {
        "relu": case_relu, "linear": case_linear, "conv2d": case_conv2d,
        "batch_norm2d": case_batch_norm2d, "avg_pool2d": case_avg_pool2d,
        "log_softmax": case_log_softmax, "layer_norm": case_layer_norm,
        "attention": case_attention, "embedding": case_embedding,
        "fused_ce_loss": case_fused_loss, "mean_matmul": case_mean_matmul_reshape,
    }


def tiny_model_problem(rng, t_in: int = 16, batch: int = 2, vocab: int = 9, length: int = 4):
    """Full encoder + dual decoder at float64 with a random caption batch (dropout off)."""
    model = LHDFF(ModelConfig(vocab_size=vocab, dropout=0.0), rng)
    model.embedding.set_mode("trainable")
    mel = rng.standard_normal((batch, t_in, 64))
    tokens = rng.integers(3, vocab, (batch, length + 1))
    tokens[:, 0] = 1

    def fn():
        return fused_ce_loss(model(mel, None, tokens[:, :-1], "dual"), tokens[:, 1:])
    return model, fn


def check_op_gradients(instances: int = 3, seed: int = 0) -> str:
    worst = {}
    with float64_mode():
        for i in range(instances):
            rng = np.random.default_rng([seed, i])
            for name, make in op_cases(rng).items():
                fn, inputs = make()
                worst[name] = max(worst.get(name, 0.0), check_gradients(fn, inputs))
    bad = {k: v for k, v in worst.items() if not v <= GRAD_TOL}
    if bad:
        raise AssertionError(f"gradient mismatch: {bad}")
    return f"max rel err {max(worst.values()):.2e} over {len(worst)} ops"


def check_model_gradient(instances: int = 2, seed: int = 0, stride: int = 4) -> str:
    """Sampled coordinates of the full encoder + dual decoder; instance ``i`` probes
    every ``stride``-th parameter tensor starting at ``i % stride``."""
    worst = 0.0
    with float64_mode():
        for i in range(instances):
            rng = np.random.default_rng([seed, 100 + i])
            model, fn = tiny_model_problem(rng)
            params = model.parameters()[i % stride::stride]
            worst = max(worst, check_sampled(fn, params, rng))
    if not worst <= GRAD_TOL:
        raise AssertionError(f"composite gradient rel err {worst:.2e}")
    return f"max rel err {worst:.2e}"


def check_fusion_identity(trials: int = 200, seed: int = 0) -> str:
    """P_fusion is checked bit-exactly at the default dtype; the loss
    decomposition at float64, since 1e-6 is below float32 resolution for losses near 10."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(2, 12)))
        a_np, b_np = rng.normal(0, 3, shape), rng.normal(0, 3, shape)
        y = rng.integers(1, shape[2], shape[:2])
        dist = fuse(Tensor(a_np), Tensor(b_np))
        if not np.array_equal(dist.p_fusion.data, dist.p_td1.data + dist.p_td2.data):
            raise AssertionError("P_fusion != P_TD1 + P_TD2")
        with float64_mode():
            dist = fuse(Tensor(a_np), Tensor(b_np))
            diff = abs(fused_ce_loss(dist, y).item() - masked_nll(dist.p_td1, y).item()
                       - masked_nll(dist.p_td2, y).item())
        worst = max(worst, diff)
    if worst > 1e-6:
        raise AssertionError(f"loss decomposition off by {worst:.2e}")
    return f"max decomposition gap {worst:.1e}"


def check_shapes(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    model = LHDFF(ModelConfig(vocab_size=8), rng).eval()
    for t_in in (16, 37):
        out = model.encode(rng.standard_normal((1, t_in, 64)), keep_intermediates=True)
        t, t3 = pooled_length(t_in, 4), pooled_length(t_in, 3)
        expect = {"x_3": (1, t3, 256), "x_final": (1, t, 1024), "x_high": (1, t, 128), "x_fusion": (1, t, 128)}
        for name, shape in expect.items():
            if getattr(out, name).shape != shape:
                raise AssertionError(f"T_in={t_in}: {name} has shape {getattr(out, name).shape}, expected {shape}")
    return "x_3, x_final, x_high, x_fusion shapes ok"


def check_metric_oracles(trials: int = 20, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(6)]
    worst = 0.0
    for _ in range(trials):
        n_items = int(rng.integers(2, 6))
        hyps = [list(rng.choice(words, int(rng.integers(1, 8)))) for _ in range(n_items)]
        refs = [[list(rng.choice(words, int(rng.integers(1, 8)))) for _ in range(int(rng.integers(1, 4)))]
                for _ in range(n_items)]
        pairs = [(metrics.bleu_n(hyps, refs, n), oracles.bleu(hyps, refs, n)) for n in range(1, 5)]
        pairs.append((metrics.rouge_l(hyps, refs), oracles.rouge_l(hyps, refs)))
        pairs.append((metrics.cider_d(hyps, refs), oracles.cider_d(hyps, refs)))
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    if worst > 1e-9:
        raise AssertionError(f"metric/oracle disagreement {worst:.2e}")
    return f"max |metric - oracle| {worst:.1e}"


def check_schedule() -> str:
    spe = 7
    got = (lr_at(4, spe - 1, spe), lr_at(10, 0, spe), lr_at(20, 0, spe))
    want = (5e-4, 5e-5, 5e-6)
    if not all(abs(g - w) <= 1e-12 * w for g, w in zip(got, want)):
        raise AssertionError(f"schedule values {got} != {want}")
    return "5e-4 / 5e-5 / 5e-6 at warmup end / epoch 10 / epoch 20"


def check_ablation_identity(seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    model = LHDFF(ModelConfig(vocab_size=10, dropout=0.0), rng).eval()
    model.encoder.proj_low.weight.data[...] = 0
    model.encoder.proj_low.bias.data[...] = 0
    model.td_fusion.load_state_dict({k: v for k, v in model.td_high.state_dict().items()})
    mel = rng.standard_normal((2, 32, 64)).astype(np.float32)
    tokens = rng.integers(3, 10, (2, 6))
    tokens[:, 0] = 1
    enc = model.encode(mel)
    if not np.array_equal(enc.x_fusion.data, enc.x_high.data):
        raise AssertionError("x_fusion != x_high with zeroed low projection")
    dual = fused_ce_loss(model.decode(tokens[:, :-1], enc, "dual"), tokens[:, 1:]).item()
    high = fused_ce_loss(model.decode(tokens[:, :-1], enc, "high_only"), tokens[:, 1:]).item()
    if dual != 2 * high:
        raise AssertionError(f"dual loss {dual!r} != 2 x high-only {high!r}")
    return "x_fusion == x_high and dual == 2 x high-only"


def check_tape_stale() -> str:
    x = Tensor(np.ones(3), requires_grad=True)
    with GradientTape() as tape:
        loss = F.sum(x * x)
    tape.backward(loss)
    try:
        tape.backward(loss)
    except Exception:
        return "second backward rejected"
    raise AssertionError("second backward on a consumed tape was accepted")


CHECKS: dict[str, Callable[[], str]] = {
    "op_gradients": check_op_gradients,
    "model_gradient": check_model_gradient,
    "fusion_identity": check_fusion_identity,
    "shape_contract": check_shapes,
    "metric_oracles": check_metric_oracles,
    "lr_schedule": check_schedule,
    "ablation_identity": check_ablation_identity,
    "stale_tape": check_tape_stale,
}


def run_selftest(echo: Callable[[str], None] = print) -> list[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        start = time.perf_counter()
        try:
            detail = check()
            passed = True
        except Exception as exc:  # report and continue with the remaining checks
            detail = f"{type(exc).__name__}: {exc}"
            passed = False
            traceback.print_exc()
        res = CheckResult(name, passed, detail, time.perf_counter() - start)
        echo(f"{'PASS' if passed else 'FAIL'}  {name:<18} {res.seconds:6.1f}s  {detail}")
        results.append(res)
    return results

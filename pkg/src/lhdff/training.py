"""Teacher-forced training with Adam, warmup/step-decay schedule and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .audio import AugmentPolicy, MelBatch, augment_batch
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .core import AdamState, GradientTape, NonFiniteError, NonFiniteGradientError, adam_step, clip_grad_norm
from .core import functional as F
from .data import CaptionDataset
from .model import LHDFF, ModelConfig, check_mode, fused_ce_loss, masked_nll
from .text import PAD, Vocabulary

log = logging.getLogger(__name__)

# independent RNG streams derived from the master seed
STREAM_INIT, STREAM_ORDER, STREAM_AUGMENT, STREAM_DROPOUT = 0, 1, 2, 3


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    base_lr: float = 5e-4
    warmup_epochs: int = 5
    decay_every: int = 10
    decay_factor: float = 0.1
    decay_anchor: str = "absolute"  # or "after_warmup"
    seed: int = 0
    mode: str = "dual"
    grad_clip: float = 1.0
    augment: bool = True
    mixture_prob: float = 0.5
    dropout: float = 0.1
    l_max: int = 22
    embedding_mode: str = "frozen"
    checkpoint_every: int = 0
    lr_override: Optional[float] = None

    def __post_init__(self):
        self.mode = check_mode(self.mode)
        for name in ("batch_size", "epochs", "base_lr", "decay_every", "decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.decay_anchor not in ("absolute", "after_warmup"):
            raise ValueError("decay_anchor must be 'absolute' or 'after_warmup'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def lr_at(epoch: int, step_within_epoch: int, steps_per_epoch: int, base_lr: float = 5e-4,
          warmup_epochs: int = 5, decay_every: int = 10, decay_factor: float = 0.1,
          anchor: str = "absolute") -> float:
    """Linear per-step warmup to ``base_lr``, then a step decay.

    With ``anchor="absolute"`` the decay boundaries sit at multiples of
    ``decay_every`` counted from epoch 0 (epochs 10 and 20 by default);
    ``"after_warmup"`` counts them from the end of warmup instead.
    """
    if epoch < warmup_epochs:
        global_step = epoch * steps_per_epoch + step_within_epoch
        return base_lr * (global_step + 1) / (warmup_epochs * steps_per_epoch)
    start = 0 if anchor == "absolute" else warmup_epochs
    return base_lr * decay_factor ** ((epoch - start) // decay_every)


def schedule_lr(config: TrainConfig, epoch: int, step: int, steps_per_epoch: int) -> float:
    if config.lr_override is not None:
        return config.lr_override
    return lr_at(epoch, step, steps_per_epoch, config.base_lr, config.warmup_epochs,
                 config.decay_every, config.decay_factor, config.decay_anchor)


@dataclass
class TrainReport:
    step_records: list[dict] = field(default_factory=list)
    epoch_records: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def epoch_losses(self) -> list[float]:
        return [r["loss"] for r in self.epoch_records]

    @property
    def step_losses(self) -> list[float]:
        return [r["loss"] for r in self.step_records]


def format_record(rec: dict) -> str:
    return f"epoch={rec['epoch']} step={rec['step']} lr={rec['lr']!r} loss={rec['loss']!r}"


def build_model(vocab_size: int, config: TrainConfig, embedding_table=None) -> LHDFF:
    rng = np.random.default_rng([config.seed, STREAM_INIT])
    model = LHDFF(ModelConfig(vocab_size=vocab_size, dropout=config.dropout), rng)
    model.embedding.set_mode(config.embedding_mode, embedding_table)
    return model


def collate(data: CaptionDataset, indices, rng: Optional[np.random.Generator] = None,
            policy: Optional[AugmentPolicy] = None, mixture_prob: float = 0.5):
    """Padded mel batch plus teacher-forcing inputs/targets for the given pair indices."""
    mels = [data.mels[data.pairs[i][0]] for i in indices]
    if rng is not None and policy is not None:
        mels = augment_batch(mels, rng, policy, mixture_prob)
    batch = MelBatch.from_mels(mels)
    rows = np.stack([data.pairs[i][1] for i in indices])
    width = int((rows != PAD).sum(axis=1).max())
    return batch, rows[:, : width - 1], rows[:, 1:width]


def model_checkpoint(model: LHDFF, state: AdamState, vocab: Vocabulary, config: TrainConfig,
                     epoch: int, step: int, best_loss: float) -> Checkpoint:
    return Checkpoint(
        params={n: p.data.copy() for n, p in model.named_parameters()},
        buffers={n: b.copy() for n, b in model.named_buffers()},
        adam_m={k: v.copy() for k, v in state.m.items()},
        adam_v={k: v.copy() for k, v in state.v.items()},
        adam_t=state.t, epoch=epoch, step=step,
        vocab_text=vocab.to_text(), config=config.to_dict(), best_loss=best_loss,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[LHDFF, Vocabulary, TrainConfig]:
    vocab = Vocabulary.from_text(ckpt.vocab_text)
    config = TrainConfig.from_dict(ckpt.config)
    model = build_model(len(vocab), dataclasses.replace(config, embedding_mode="trainable"))
    model.load_state_dict(ckpt.model_state())
    model.embedding.set_mode("frozen" if config.embedding_mode == "imported" else config.embedding_mode)
    model.eval()
    return model, vocab, config


def evaluate_loss(model: LHDFF, data: CaptionDataset, mode: str, batch_size: int = 32) -> dict:
    """Token-averaged losses in eval mode.

    ``fused`` is the training objective (for dual mode, the sum of both branch
    cross-entropies); ``nll`` renormalizes the fused scores into a proper
    distribution so that modes can be compared on one scale.
    """
    was_training = model.training
    model.eval()
    totals = {"fused": 0.0, "nll": 0.0}
    n_tok = 0
    try:
        for start in range(0, len(data), batch_size):
            batch, inputs, targets = collate(data, range(start, min(start + batch_size, len(data))))
            dist = model(batch.data, batch.lengths, inputs, mode)
            k = int((targets != PAD).sum())
            totals["fused"] += fused_ce_loss(dist, targets).item() * k
            totals["nll"] += masked_nll(F.log_softmax(dist.p_fusion), targets).item() * k
            n_tok += k
    finally:
        model.train(was_training)
    return {k: v / n_tok for k, v in totals.items()}


def train(config: TrainConfig, data: CaptionDataset, vocab: Vocabulary, model: Optional[LHDFF] = None,
          out_dir=None, val_data: Optional[CaptionDataset] = None, resume=None,
          embedding_table=None) -> TrainReport:
    """Run (or resume) training and return per-step and per-epoch loss records.

    Checkpoints ``last.ckpt``/``best.ckpt`` (and ``epoch_XXX.ckpt`` when
    ``checkpoint_every`` is set) and ``report.txt`` are written under ``out_dir``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = build_model(len(vocab), config, embedding_table)
    state = AdamState()
    start_epoch, global_step, best = 0, 0, math.inf

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        ckpt.check_vocab(vocab.digest())
        mode_frozen = model.embedding.mode
        model.load_state_dict(ckpt.model_state())
        model.embedding.set_mode("frozen" if mode_frozen == "imported" else mode_frozen)
        state.t = ckpt.adam_t
        state.m = {k: v.copy() for k, v in ckpt.adam_m.items()}
        state.v = {k: v.copy() for k, v in ckpt.adam_v.items()}
        start_epoch, global_step, best = ckpt.epoch + 1, ckpt.step, ckpt.best_loss

    params = dict(model.named_parameters())
    trainable = [p for p in params.values() if p.requires_grad]
    policy = AugmentPolicy() if config.augment else None
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    report = TrainReport()
    report_path = out_dir / "report.txt" if out_dir is not None else None
    if report_path is not None and resume is None:
        report_path.write_text("")

    model.train()
    for epoch in range(start_epoch, config.epochs):
        order = np.random.default_rng([config.seed, STREAM_ORDER, epoch]).permutation(len(data))
        weighted, n_tok_epoch = 0.0, 0
        lr = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            aug_rng = np.random.default_rng([config.seed, STREAM_AUGMENT, epoch, s]) if policy else None
            batch, inputs, targets = collate(data, idx, aug_rng, policy, config.mixture_prob)
            model.set_dropout_rng(np.random.default_rng([config.seed, STREAM_DROPOUT, epoch, s]))
            lr = schedule_lr(config, epoch, s, steps_per_epoch)
            try:
                with GradientTape() as tape:
                    loss = fused_ce_loss(model(batch.data, batch.lengths, inputs, config.mode), targets)
                tape.backward(loss)
                clip_grad_norm(trainable, config.grad_clip)
                adam_step(params, state, lr)
            except (NonFiniteError, NonFiniteGradientError) as exc:
                _dump_batch(out_dir, epoch, s, batch)
                raise TrainingDivergedError(
                    f"non-finite values at epoch {epoch} step {s} (clips {batch.source_ids}): {exc}") from exc
            finally:
                model.zero_grad()
            value = loss.item()
            k = int((targets != PAD).sum())
            weighted += value * k
            n_tok_epoch += k
            global_step += 1
            report.step_records.append({"epoch": epoch, "step": global_step, "lr": lr, "loss": value})

        epoch_loss = weighted / n_tok_epoch
        record = {"epoch": epoch, "step": global_step, "lr": lr, "loss": epoch_loss}
        report.epoch_records.append(record)
        log.info(format_record(record))

        if out_dir is not None:
            with open(report_path, "a") as fh:
                fh.write(format_record(record) + "\n")
            score = evaluate_loss(model, val_data, config.mode)["fused"] if val_data is not None else epoch_loss
            improved = score < best
            best = min(best, score)
            ckpt = model_checkpoint(model, state, vocab, config, epoch, global_step, best)
            save_checkpoint(out_dir / "last.ckpt", ckpt)
            report.checkpoints.append(out_dir / "last.ckpt")
            if improved:
                save_checkpoint(out_dir / "best.ckpt", ckpt)
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                path = out_dir / f"epoch_{epoch:03d}.ckpt"
                save_checkpoint(path, ckpt)
                report.checkpoints.append(path)
    model.eval()
    return report


def _dump_batch(out_dir: Optional[Path], epoch: int, step: int, batch: MelBatch) -> None:
    if out_dir is None:
        return
    np.savez(out_dir / f"diverged_e{epoch}_s{step}.npz", mel=batch.data, lengths=batch.lengths,
             clips=np.array(batch.source_ids))

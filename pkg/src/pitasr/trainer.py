"""Utterance-level SGD/BPTT training with gradient clipping.

Minibatches are whole utterances: per utterance one forward pass and one
full-length backward pass, gradients summed across the minibatch, averaged,
clipped, and applied. The S=1 case is the single-talker baseline; nothing else
changes, since the permutation-invariant loss reduces to plain CE there.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import ModelParams, forward, save_checkpoint
from .pit import pit_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    clip_threshold: float = 0.0003
    clip_mode: str = "element"        # "element" clamps entries, "norm" rescales by global L2
    minibatch_utterances: int = 8
    epochs: int = 10
    shuffle_seed: int = 0
    checkpoint_dir: str | Path | None = None
    lr_halving: bool = True           # halve lr when held-out J stops improving
    min_improvement: float = 1e-3

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.minibatch_utterances < 1:
            raise ValueError("minibatch_utterances must be >= 1")
        if self.clip_mode not in ("element", "norm"):
            raise ValueError(f"unknown clip_mode {self.clip_mode!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_j: float
    heldout_j: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    final_checkpoint: Path | None = None


def clip_gradients(grads, threshold: float, mode: str = "element"):
    """Clamp gradients to the threshold; returns new arrays, inputs untouched.

    Element mode clamps each entry to [-threshold, threshold]. Norm mode
    rescales the whole gradient set so its global L2 norm is at most the
    threshold.
    """
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    single = isinstance(grads, np.ndarray)
    arrays = [grads] if single else list(grads)
    if mode == "element":
        clipped = [np.clip(g, -threshold, threshold) for g in arrays]
    elif mode == "norm":
        total = np.sqrt(sum(float(np.sum(g * g)) for g in arrays))
        factor = threshold / total if total > threshold else 1.0
        clipped = [g * factor for g in arrays]
    else:
        raise ValueError(f"unknown clip mode {mode!r}")
    return clipped[0] if single else clipped


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], lr: float):
    """Vanilla SGD update from already-clipped gradients; zeroes grads after.

    Aborts on any non-finite gradient or resulting parameter, naming it.
    """
    for name, p in params.named_params():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        p.data -= lr * g
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"update produced non-finite values in {name}")
        p.zero_grad()


def utterance_loss(params: ModelParams, sample, with_grad: bool):
    """One utterance's J; backward pass accumulates into params when asked."""
    if with_grad:
        with ad.Graph() as graph:
            result = pit_loss(forward(params, sample.features), sample.targets)
            ad.backward(graph, result.node)
    else:
        result = pit_loss(forward(params, sample.features), sample.targets)
    if not np.isfinite(result.value):
        raise FloatingPointError(f"non-finite loss on utterance {sample.features.utterance_id!r}")
    return result.value


def accumulate_minibatch(params: ModelParams, batch) -> float:
    """Sum gradients over a minibatch into params.grad; returns mean J."""
    total = 0.0
    for sample in batch:
        total += utterance_loss(params, sample, with_grad=True)
    return total / len(batch)


def apply_update(params: ModelParams, batch_size: int, lr: float, config: TrainConfig):
    """Average, clip, and apply the accumulated gradients."""
    names = [name for name, _ in params.named_params()]
    averaged = [p.grad / batch_size for _, p in params.named_params()]
    clipped = clip_gradients(averaged, config.clip_threshold, config.clip_mode)
    sgd_step(params, dict(zip(names, clipped)), lr)


def mean_loss(params: ModelParams, samples) -> float:
    """Mean J over a sample list, no gradients."""
    if not samples:
        return float("nan")
    return sum(utterance_loss(params, s, with_grad=False) for s in samples) / len(samples)


def _validate_compat(params: ModelParams, samples):
    cfg = params.config
    for sample in samples:
        if sample.features.frames.shape[1] != cfg.feat_dim:
            raise ValueError(f"sample {sample.features.utterance_id!r}: feature dim "
                             f"{sample.features.frames.shape[1]} != model feat_dim {cfg.feat_dim}")
        if len(sample.targets) != cfg.num_streams:
            raise ValueError(f"sample {sample.features.utterance_id!r}: {len(sample.targets)} "
                             f"target streams != model num_streams {cfg.num_streams}")
        for t in sample.targets:
            if t.senones.size and t.senones.max() >= cfg.num_senones:
                raise ValueError(f"sample {sample.features.utterance_id!r}: senone id "
                                 f"{int(t.senones.max())} >= model num_senones {cfg.num_senones}")


def train(params: ModelParams, train_samples, config: TrainConfig,
          heldout_samples=()) -> TrainReport:
    """Shuffled full-length-utterance SGD with per-epoch checkpoints.

    Deterministic for fixed seeds and single-worker execution: the shuffle
    stream, minibatch boundaries, and update order are all fixed.
    """
    if not train_samples:
        raise ValueError("train: no training samples")
    _validate_compat(params, train_samples)
    _validate_compat(params, heldout_samples)

    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.shuffle_seed)
    report = TrainReport()
    lr = config.learning_rate
    prev_heldout = np.inf
    params.zero_grads()

    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train_samples))
        epoch_total = 0.0
        for lo in range(0, len(order), config.minibatch_utterances):
            batch = [train_samples[i] for i in order[lo:lo + config.minibatch_utterances]]
            epoch_total += accumulate_minibatch(params, batch) * len(batch)
            apply_update(params, len(batch), lr, config)
        train_j = epoch_total / len(train_samples)
        heldout_j = mean_loss(params, heldout_samples)
        seconds = time.perf_counter() - start

        if ckpt_dir:
            path = ckpt_dir / f"epoch_{epoch:03d}.pitm"
            save_checkpoint(params, path)
            report.final_checkpoint = path
            with open(ckpt_dir / "train.log", "a", encoding="utf-8") as fh:
                fh.write(f"{epoch}\t{train_j:.6f}\t{heldout_j:.6f}\t{seconds:.3f}\n")

        report.epochs.append(EpochRecord(epoch, train_j, heldout_j, seconds))
        log.info("epoch %d: train_j=%.4f heldout_j=%.4f lr=%.4g (%.1fs)",
                 epoch, train_j, heldout_j, lr, seconds)

        if config.lr_halving and heldout_samples:
            if prev_heldout - heldout_j < config.min_improvement:
                lr *= 0.5
                log.info("held-out J stalled, halving lr to %.4g", lr)
            prev_heldout = min(prev_heldout, heldout_j)
    return report


def train_baseline(params: ModelParams, clean_samples, config: TrainConfig,
                   heldout_samples=()) -> TrainReport:
    """Single-talker baseline training: the S=1 instance of the same loop."""
    if params.config.num_streams != 1:
        raise ValueError("train_baseline expects a single-stream (S=1) model")
    return train(params, clean_samples, config, heldout_samples)

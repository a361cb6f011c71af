"""Optimization loop: Adam, warmup+decay schedule, clipping, early stopping.

Training is single-threaded and fully reproducible from the config seed:
shuffling, dropout and initialization all derive from it.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import checkpoint as ckpt
from .data import Batch, accuracy, make_batches, map_mrr
from .tensor import NonFiniteError, Tape, Tensor, backward, record_op, zero_grads


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    warmup_steps: int = 1000
    decay_rate: float = 0.97
    decay_steps: int = 1000
    batch_size: int = 64
    clip_threshold: float = 5.0
    max_epochs: int = 10
    early_stop_metric: str = "accuracy"   # accuracy | map | mrr
    patience: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.clip_threshold <= 0:
            raise ValueError(f"clip_threshold must be > 0, got {self.clip_threshold}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.early_stop_metric not in ("accuracy", "map", "mrr"):
            raise ValueError(f"unknown early_stop_metric {self.early_stop_metric!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then exponential decay."""
    if step < cfg.warmup_steps:
        return cfg.base_lr * (step + 1) / cfg.warmup_steps
    return cfg.base_lr * cfg.decay_rate ** ((step - cfg.warmup_steps) / cfg.decay_steps)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_gradients(grads, threshold: float):
    """Scale all gradients by threshold/norm when the global L2 norm exceeds it."""
    for g in grads:
        if not np.isfinite(g).all():
            raise DivergenceError("non-finite gradient before clipping")
    norm = global_norm(grads)
    if norm > threshold:
        scale = threshold / norm
        grads = [g * scale for g in grads]
    return grads


class Adam:
    """Bias-corrected Adam over a parameter list."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.tensors = [t for p in self.params for t in p.tensors()]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]
        self.t = 0

    def step(self, lr: float, clip_threshold: float | None = None) -> float:
        """One update from the accumulated grads; returns the pre-clip norm."""
        grads = []
        for t in self.tensors:
            grads.append(np.zeros_like(t.data) if t.grad is None else t.grad)
        norm = global_norm(grads)
        if clip_threshold is not None:
            grads = clip_gradients(grads, clip_threshold)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, (tens, g) in enumerate(zip(self.tensors, grads)):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            tens.data = tens.data - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(tens.data.dtype)
        return norm


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true classes, stabilized."""
    z = logits.data
    labels = np.asarray(labels)
    if labels.max(initial=0) >= z.shape[-1]:
        raise ValueError(f"label {labels.max()} out of range for {z.shape[-1]} classes")
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(z, labels[:, None], axis=-1)
    loss = np.asarray((lse - picked).mean(), dtype=z.dtype)
    probs = np.exp(z - lse)

    def vjp(g):
        dz = probs.copy()
        np.add.at(dz, (np.arange(len(labels)), labels), -1.0)
        return [(logits, dz * (g / len(labels)))]

    return record_op("cross_entropy", (logits,), loss, vjp)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_probs(model, batches) -> np.ndarray:
    """Eval-mode class probabilities over a batch list, in order."""
    chunks = [softmax_probs(model.forward_batch(b, training=False).data) for b in batches]
    return np.concatenate(chunks, axis=0)


def evaluate(model, batches, metric: str = "accuracy") -> dict[str, float]:
    """accuracy, or map+mrr for ranking datasets (scored by P(class 1))."""
    probs = predict_probs(model, batches)
    labels = np.concatenate([b.labels for b in batches])
    if metric in ("map", "mrr", "map_mrr"):
        groups = [g for b in batches for g in (b.group_ids or [None] * len(b))]
        m, r = map_mrr(probs[:, 1], labels, groups)
        return {"map": m, "mrr": r}
    return {"accuracy": accuracy(probs.argmax(axis=-1), labels)}


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_metric: float
    lr: float
    wall_time: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_metric: float
    best_epoch: int
    steps: int
    checkpoint_path: str | None = None


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "dev_metric", "lr", "wall_time"])
        for row in history:
            writer.writerow([row.epoch, f"{row.train_loss:.6f}", f"{row.dev_metric:.6f}",
                             f"{row.lr:.8f}", f"{row.wall_time:.3f}"])


def train(model, train_examples, dev_examples, vocab, cfg: TrainConfig,
          out_dir=None, run_config: dict | None = None, log=None) -> TrainResult:
    """Run the full loop; early-stop on the dev metric; keep the best weights.

    The model is left holding the best parameters. When ``out_dir`` is
    given, checkpoint + history land there.
    """
    cfg.validate()
    metric_key = cfg.early_stop_metric
    data_metric = "map_mrr" if metric_key in ("map", "mrr") else "accuracy"
    dev_batches = make_batches(dev_examples, vocab, cfg.batch_size)
    optimizer = Adam(model.parameters())
    history: list[EpochStats] = []
    best_metric, best_epoch, best_state = -np.inf, -1, None
    step = 0
    since_best = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        batches = make_batches(train_examples, vocab, cfg.batch_size,
                               shuffle=True, seed=cfg.seed + epoch)
        losses = []
        for batch in batches:
            lr = lr_at(step, cfg)
            try:
                with Tape() as tape:
                    logits = model.forward_batch(batch, training=True)
                    loss = cross_entropy(logits, batch.labels)
                    backward(loss, tape)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite loss at step {step}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at step {step}")
            losses.append(float(loss.data))
            optimizer.step(lr, clip_threshold=cfg.clip_threshold)
            zero_grads(model.parameters())
            step += 1
        scores = evaluate(model, dev_batches, data_metric)
        dev_metric = scores[metric_key] if metric_key in scores else scores["accuracy"]
        stats = EpochStats(epoch, float(np.mean(losses)), dev_metric,
                           lr_at(step - 1, cfg), time.perf_counter() - t0)
        history.append(stats)
        if log is not None:
            log(f"epoch {epoch}: loss {stats.train_loss:.4f} dev {metric_key} {dev_metric:.4f}")
        if dev_metric > best_metric:
            best_metric, best_epoch = dev_metric, epoch
            best_state = {k: v.copy() for k, v in model.state_arrays().items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    if best_state is not None:
        model.load_state_arrays(best_state)
    result = TrainResult(history, best_metric, best_epoch, step)
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        config = dict(run_config or {})
        config.setdefault("model", model.config.to_dict())
        config.setdefault("train", cfg.to_dict())
        meta = {"seed": cfg.seed, "steps": step, "best_epoch": best_epoch,
                f"dev_{metric_key}": f"{best_metric:.6f}"}
        path = out / "checkpoint.bin"
        ckpt.save_checkpoint(path, model.state_arrays(), config, meta)
        write_history(out / "history.csv", history)
        result.checkpoint_path = str(path)
    return result


def ensemble_vote(prob_list) -> np.ndarray:
    """Majority label across models; ties fall back to the mean probability."""
    if len(prob_list) < 1:
        raise ValueError("ensemble_vote needs at least one model's predictions")
    probs = np.stack([np.asarray(p) for p in prob_list])  # [K, B, C]
    if probs.ndim != 3:
        raise ValueError(f"expected [models, batch, classes] probabilities, got {probs.shape}")
    k, b, c = probs.shape
    votes = probs.argmax(axis=-1)                          # [K, B]
    counts = np.zeros((b, c), dtype=np.int64)
    for i in range(b):
        counts[i] = np.bincount(votes[:, i], minlength=c)
    mean_probs = probs.mean(axis=0)                        # [B, C]
    out = np.empty(b, dtype=np.int64)
    for i in range(b):
        top = counts[i].max()
        tied = np.flatnonzero(counts[i] == top)
        out[i] = tied[np.argmax(mean_probs[i, tied])] if len(tied) > 1 else tied[0]
    return out

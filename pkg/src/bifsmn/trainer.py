"""Binarization-aware training with thinnable depth and wavelet distillation.

Each step runs the frozen full-precision teacher once at full depth, then
the student once per ``delta``. Losses are combined as

    total = sum_delta 2**-(delta - 1) * (ce_delta + gamma * dist_delta)

and the gradients of every branch are accumulated before one plain SGD
update of the latent (real-valued) weights.
"""
import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import wavelet
from .errors import ConfigError, DivergenceError, ShapeError
from .fsmn import active_layers, backward, forward_batch, init_model, softmax

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iterations: int = 2000
    learning_rate: float = 0.05
    gamma: float = 0.01
    delta_set: tuple = None  # None: the model's delta set
    seed: int = 0
    batch_size: int = 32
    eval_every: int = 100

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 1 and iterations >= 0")


@dataclass
class LossBreakdown:
    ce: dict
    dist: dict
    total: float
    gamma: float = 0.0

    def weighted_check(self):
        return sum(delta_weight(d) * (self.ce[d] + self.gamma * self.dist[d]) for d in self.ce)


def delta_weight(delta):
    return 1.0 / 2 ** (delta - 1)


def ce_loss(logits, labels):
    """Mean softmax cross-entropy."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{logits.shape[0]} logit rows for {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def _ce_grad(logits, labels):
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def total_loss(ce, dist, gamma):
    """Combine per-delta losses (dicts keyed by delta) into a :class:`LossBreakdown`."""
    if set(ce) != set(dist):
        raise ShapeError("ce and dist must cover the same deltas")
    total = sum(delta_weight(d) * (ce[d] + gamma * dist[d]) for d in sorted(ce))
    return LossBreakdown(dict(ce), dict(dist), float(total), gamma)


def teacher_targets(teacher, X, enhance=True):
    """Attention maps of the (enhanced) teacher memory outputs, keyed by layer."""
    trace, _ = forward_batch(teacher, X, 1)
    out = {}
    for ell, m in zip(trace.active_layers, trace.memory_outputs):
        target = wavelet.enhance_batch(m) if enhance else m
        out[ell] = wavelet.attention_batch(target)
    return out


def _dist_and_grad(states, layers, targets):
    """Batch-mean distillation loss and its gradient per layer."""
    loss = 0.0
    grads = {}
    for ell, S in zip(layers, states):
        B = S.shape[0]
        q = S * S
        n = np.sqrt((q * q).sum(axis=(1, 2), keepdims=True))
        n_safe = np.where(n > 0, n, 1.0)
        A = q / n_safe
        D = A - targets[ell]
        L = np.sqrt((D * D).sum(axis=(1, 2), keepdims=True))
        loss += float(L.sum()) / B
        dA = np.divide(D, L, out=np.zeros_like(D), where=L > 0) / B
        dq = (dA - A * (dA * A).sum(axis=(1, 2), keepdims=True)) / n_safe
        grads[ell] = dq * 2.0 * S
    return loss, grads


def loss_and_grads(
    model, X, y, delta_set=None, gamma=0.0, targets=None, bn_mode="train", update_stats=False
):
    """Weighted multi-depth loss and its gradient w.r.t. ``model.parameters()``."""
    delta_set = sorted(delta_set or model.delta_set)
    y = np.asarray(y, dtype=np.int64)
    grads = OrderedDict((k, np.zeros(v.shape)) for k, v in model.parameters().items())
    ce, dist = {}, {}
    for delta in delta_set:
        trace, cache = forward_batch(model, X, delta, bn_mode=bn_mode, update_stats=update_stats)
        w = delta_weight(delta)
        ce[delta] = ce_loss(trace.logits, y)
        d_logits = w * _ce_grad(trace.logits, y)
        d_mem = {}
        if targets is not None:
            dist[delta], g_states = _dist_and_grad(
                trace.memory_outputs, trace.active_layers, targets
            )
            if gamma:
                d_mem = {ell: w * gamma * g for ell, g in g_states.items()}
        else:
            dist[delta] = 0.0
        for k, g in backward(model, cache, d_logits, d_mem).items():
            grads[k] += g
    return total_loss(ce, dist, gamma), grads


def sgd_update(model, grads, lr):
    params = model.parameters()
    for k, g in grads.items():
        p = params[k]
        p[...] = (p.astype(np.float64) - lr * g).astype(p.dtype)


def train_step(model, teacher, batch, cfg):
    """Teacher pass, one student pass per delta, then a single update."""
    X, y = batch
    delta_set = tuple(cfg.delta_set or model.delta_set)
    for d in delta_set:
        model.check_delta(d)
    targets = teacher_targets(teacher, X) if teacher is not None else None
    losses, grads = loss_and_grads(
        model, X, y, delta_set, cfg.gamma, targets, bn_mode="train", update_stats=True
    )
    if not np.isfinite(losses.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        raise DivergenceError(
            f"non-finite loss/gradient: total={losses.total} ce={losses.ce} "
            f"dist={losses.dist} bad_grads={bad[:5]}"
        )
    sgd_update(model, grads, cfg.learning_rate)
    return losses


# --------------------------------------------------------------------------
# data


@dataclass
class ToyDataset:
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    n_classes: int = field(default=2)


def toy_dataset(seed=0, classes=4, samples=2000, frames=16, features=16, noise=0.5):
    """Synthetic spectrogram-like sequences, one 2-D sinusoid frequency per class.

    Class ``k`` is a cosine grid whose time and feature frequencies are
    fixed for the class, with a random phase per sample plus Gaussian
    noise. The first 80% of a seeded shuffle is the training split.
    """
    if classes < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng(seed)
    t = np.arange(frames)[:, None] / frames
    f = np.arange(features)[None, :] / features
    labels = np.arange(samples) % classes
    rng.shuffle(labels)
    X = np.empty((samples, frames, features), np.float32)
    for n, k in enumerate(labels):
        ft = 1 + k
        ff = 1 + (k % 2) * 2 + k // 2
        phase = rng.uniform(0, 2 * np.pi)
        pattern = np.cos(2 * np.pi * (ft * t + ff * f) + phase)
        X[n] = pattern + noise * rng.standard_normal((frames, features))
    split = int(round(0.8 * samples))
    return ToyDataset(X[:split], labels[:split], X[split:], labels[split:], classes)


# --------------------------------------------------------------------------
# loops


def evaluate(model, X, y, delta, batch_size=256):
    correct = 0
    for i in range(0, len(X), batch_size):
        trace, _ = forward_batch(model, X[i : i + batch_size], delta)
        correct += int(np.sum(trace.logits.argmax(axis=1) == y[i : i + batch_size]))
    return correct / max(1, len(X))


LOG_FIELDS = ("step", "delta", "ce", "dist", "total", "test_acc")


def fit(model, data, cfg, teacher=None, log=None):
    """Train ``model`` in place on ``data``; returns the list of log rows.

    ``log`` may be an open text file; rows are written as CSV as they are
    produced so a divergence leaves a partial log behind.
    """
    rng = np.random.default_rng(cfg.seed)
    delta_set = tuple(cfg.delta_set or model.delta_set)
    writer = None
    if log is not None:
        writer = csv.writer(log, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
    rows = []
    n = len(data.X_train)
    order = rng.permutation(n)
    pos = 0
    for step in range(1, cfg.iterations + 1):
        if pos + cfg.batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        losses = train_step(model, teacher, (data.X_train[idx], data.y_train[idx]), cfg)
        evaluate_now = step % cfg.eval_every == 0 or step == cfg.iterations
        for d in delta_set:
            acc = evaluate(model, data.X_test, data.y_test, d) if evaluate_now else None
            row = (
                step, d, f"{losses.ce[d]:.6f}", f"{losses.dist[d]:.6f}",
                f"{losses.total:.6f}", "" if acc is None else f"{acc:.4f}",
            )
            rows.append(row)
            if writer is not None:
                writer.writerow(row)
        if evaluate_now:
            logger.info("step %d total %.4f", step, losses.total)
    return rows


def train_teacher(data, n_blocks, seed=0, iterations=500, learning_rate=0.05, **arch):
    """Full-precision depth-1 teacher with the same topology as the student."""
    teacher = init_model(
        data.X_train.shape[2], data.n_classes, n_blocks=n_blocks, delta_set=(1,),
        binarized=False, frames=data.X_train.shape[1], seed=seed, **arch,
    )
    fit(teacher, data, TrainConfig(iterations=iterations, learning_rate=learning_rate,
                                   gamma=0.0, seed=seed, delta_set=(1,)))
    return teacher


TOY_ARCH = dict(hidden_dim=32, proj_dim=32, n_back=2, n_ahead=1)


def run_toy(seed=0, steps=1500, gamma=0.01, data_seed=None, teacher=None, data=None,
            n_blocks=4, teacher_steps=500, learning_rate=0.05, log=None, eval_every=100):
    """Desk-scale pipeline: toy data, full-precision teacher, binarized student.

    Returns ``(student, teacher, data, log_rows)``. ``data_seed`` defaults to
    ``seed``; a prepared ``teacher``/``data`` pair may be reused across runs.
    """
    if data is None:
        data = toy_dataset(seed if data_seed is None else data_seed, classes=4, samples=2000)
    if teacher is None and gamma > 0:
        teacher = train_teacher(data, n_blocks, seed=seed, iterations=teacher_steps, **TOY_ARCH)
    student = init_model(
        data.X_train.shape[2], data.n_classes, n_blocks=n_blocks, binarized=True,
        frames=data.X_train.shape[1], seed=seed + 1, **TOY_ARCH,
    )
    cfg = TrainConfig(iterations=steps, learning_rate=learning_rate, gamma=gamma, seed=seed,
                      eval_every=eval_every)
    rows = fit(student, data, cfg, teacher=teacher, log=log)
    return student, teacher, data, rows

"""Cross-entropy loss, Adam, and the deterministic training loop.

The loop trains on the batch-summed negative log-likelihood (gradients go
through a softmax-fused op for stability) and tracks the per-sample mean
loss per epoch. When the epoch-mean loss stops declining, the per-modality
gate latches on for the rest of the run and the logit scales join the
gradient graph. Identical seeds and inputs give bit-identical parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import rng
from .autodiff import Tensor, backward, make_node
from .errors import DimensionError, InputError
from .model import FafModel, ModelConfig

_TINY = float(np.finfo(np.float32).tiny)


def _label_array(labels, num_classes: int) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64).reshape(-1)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise InputError(
            f"label out of range: expected [0, {num_classes}), got "
            f"{int(arr.min())}..{int(arr.max())}"
        )
    return arr


def cross_entropy(pred: Tensor, labels) -> Tensor:
    """Batch-summed negative log-likelihood of probability rows.

    pred rows must already sum to 1 (within 1e-5). The true-class
    probability is clamped at the smallest positive float32 so the loss
    stays finite; it is exactly 0 only for one-hot-correct predictions.
    """
    probs = pred if isinstance(pred, Tensor) else Tensor(pred)
    if probs.data.ndim != 2:
        raise DimensionError(f"cross_entropy: expected [batch x classes], got {probs.shape}")
    batch, num_classes = probs.shape
    sums = probs.data.sum(axis=1)
    if not np.allclose(sums, 1.0, atol=1e-5):
        raise InputError("cross_entropy: prediction rows must sum to 1")
    y = _label_array(labels, num_classes)
    if y.size != batch:
        raise InputError(f"cross_entropy: {batch} rows but {y.size} labels")
    picked = np.maximum(probs.data[np.arange(batch), y], _TINY)
    value = -np.log(picked).sum()

    def backward_fn(g):
        d = np.zeros_like(probs.data)
        d[np.arange(batch), y] = -1.0 / picked
        return (d * float(np.ravel(g)[0]),)

    return make_node(np.asarray(value, dtype=probs.dtype), (probs,), backward_fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Fused softmax + negative log-likelihood over a batch of logits.

    Numerically stable (log-sum-exp with max subtraction); the gradient is
    softmax(logits) minus the one-hot truth.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected 2-d logits, got {logits.shape}")
    batch, num_classes = logits.shape
    y = _label_array(labels, num_classes)
    if y.size != batch:
        raise InputError(f"softmax_cross_entropy: {batch} rows but {y.size} labels")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    value = (lse[:, 0] - z[np.arange(batch), y]).sum()
    probs = np.exp(z - lse)

    def backward_fn(g):
        d = probs.copy()
        d[np.arange(batch), y] -= 1.0
        return (d * float(np.ravel(g)[0]),)

    return make_node(np.asarray(value, dtype=logits.dtype), (logits,), backward_fn)


@dataclass
class AdamState:
    """Adam moment buffers; shapes mirror the parameters."""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int
    lr: float
    beta1: float
    beta2: float
    eps: float

    @classmethod
    def fresh(cls, params: Dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            t=0,
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One Adam update with bias correction, in place on params and state."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(
                f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}"
            )
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    b1c = 1.0 - b1**state.t
    b2c = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
    return params, state


def loss_declining(history: Sequence[float], rel_tol: float) -> bool:
    """Whether the most recent epoch improved on its predecessor.

    True with fewer than two epochs recorded; afterwards true iff the
    relative drop (prev - last) / max(prev, 1e-12) exceeds rel_tol.
    """
    if len(history) < 2:
        return True
    prev, last = history[-2], history[-1]
    return (prev - last) / max(prev, 1e-12) > rel_tol


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    decline_rel_tol: float = 1e-3
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.lr <= 0:
            raise InputError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("beta1 and beta2 must lie in [0, 1)")
        if self.decline_rel_tol < 0:
            raise InputError("decline_rel_tol must be >= 0")


@dataclass
class TrainHistory:
    """Per-epoch mean loss and train accuracy, plus the gate latch epoch."""

    epoch_losses: List[float] = field(default_factory=list)
    epoch_accuracies: List[float] = field(default_factory=list)
    gate_epoch: Optional[int] = None


def train(dataset, model_config: ModelConfig, train_config: TrainConfig) -> Tuple[FafModel, TrainHistory]:
    """Train a fresh model on the dataset; deterministic per seed.

    Per epoch: seeded shuffle, minibatch forward -> fused cross-entropy ->
    backward -> adam step (last partial batch kept). After each epoch the
    decline detector runs on the epoch-mean losses; the first non-decline
    latches the gate permanently.
    """
    records = list(dataset.records)
    if not records:
        raise InputError("training dataset is empty")
    labels = list(model_config.label_names)
    if tuple(dataset.label_names) != tuple(labels):
        raise InputError(
            f"dataset vocabulary {tuple(dataset.label_names)} does not match "
            f"model labels {tuple(labels)}"
        )

    model = FafModel.init(model_config, train_config.seed)

    # Validate and assemble the full feature matrices up front so a bad
    # record fails before any optimization step.
    n = len(records)
    features: Dict = {}
    for m in model_config.enabled_modalities:
        want = model_config.input_dims[m]
        mat = np.empty((n, want), dtype=np.float32)
        for i, rec in enumerate(records):
            vec = getattr(rec, m.value)
            if vec is None:
                raise InputError(f"record {rec.id!r} is missing modality: {m.value}")
            vec = np.asarray(vec, dtype=np.float32)
            if vec.shape != (want,):
                raise DimensionError(
                    f"record {rec.id!r}: {m.value} vector has length {vec.shape[0]}, "
                    f"expected {want}"
                )
            mat[i] = vec
        features[m] = mat
    y_all = np.array([labels.index(r.label) for r in records], dtype=np.int64)

    param_arrays = {name: t.data for name, t in model.params.items()}
    state = AdamState.fresh(
        param_arrays,
        lr=train_config.lr,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.eps,
    )
    shuffler = rng.stream(train_config.seed, rng.STREAM_SHUFFLE)
    history = TrainHistory()

    for epoch in range(train_config.epochs):
        order = shuffler.permutation(n) if train_config.shuffle else np.arange(n)
        total_nll = 0.0
        correct = 0
        for start in range(0, n, train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            batch = {m: features[m][idx] for m in model_config.enabled_modalities}
            y = y_all[idx]
            logits = model.forward_logits(batch)
            loss = softmax_cross_entropy(logits, y)
            grads = backward(loss, params=model.params.values())
            adam_step(param_arrays, {k: g.data for k, g in grads.items()}, state)
            total_nll += loss.item()
            correct += int((logits.data.argmax(axis=1) == y).sum())
        history.epoch_losses.append(total_nll / n)
        history.epoch_accuracies.append(correct / n)
        if not model.gate_active and not loss_declining(history.epoch_losses, train_config.decline_rel_tol):
            model.gate_active = True
            history.gate_epoch = epoch
    return model, history

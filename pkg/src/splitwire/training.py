"""Mini-batch training and evaluation for :class:`~splitwire.model.ModelSpec`."""

from __future__ import annotations

import logging
import math

import numpy as np

from . import codec
from .data import Dataset, batches
from .nn import SGD, TrainingDiverged, run_backward, run_forward

log = logging.getLogger(__name__)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def train(model, dataset: Dataset, *, epochs: int, learning_rate: float, batch_size: int = 32,
          seed: int = 0, momentum: float = 0.9, trainable=None):
    """Train a copy of ``model``; returns ``(trained_model, epoch_losses)``.

    ``trainable`` optionally restricts updates to parameters whose path
    starts with one of the given prefixes.
    """
    model = model.copy()
    opt = SGD(learning_rate, momentum)
    params = model.parameters()
    if trainable is not None:
        prefixes = tuple(trainable)
        params = {k: v for k, v in params.items() if k.startswith(prefixes)}
    history = []
    for epoch in range(epochs):
        total, count = 0.0, 0
        for xb, yb in batches(dataset, batch_size, seed=[seed, epoch]):
            logits, caches = run_forward(model.layers, xb)
            loss, dlogits = softmax_cross_entropy(logits, yb)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            _, grads = run_backward(model.layers, caches, dlogits)
            flat = {
                f"layers.{i}.{name}": g
                for i, layer_grads in enumerate(grads)
                for name, g in layer_grads.items()
            }
            opt.step(params, {k: flat[k] for k in params})
            total += loss * len(yb)
            count += len(yb)
        history.append(total / count)
        log.info("epoch %d loss %.4f", epoch + 1, history[-1])
    return model, history


def predict(model, images: np.ndarray, quant_bits: int | None = None,
            batch_size: int = 256) -> np.ndarray:
    """Logits for ``images``.

    With ``quant_bits`` set and a compressed model, every intermediate tensor
    is quantized and dequantized as it would be on the wire.
    """
    out = []
    for i in range(0, len(images), batch_size):
        xb = images[i : i + batch_size]
        cfg = getattr(model, "compression", None)
        if quant_bits is not None and cfg is not None:
            l = cfg.split_point
            h = model.forward_device(l, xb)
            h = codec.roundtrip_batch(h, quant_bits)
            out.append(model.forward_server(l, h))
        else:
            out.append(model.forward(xb))
    return np.concatenate(out)


def evaluate_accuracy(model, dataset: Dataset, quant_bits: int | None = None) -> float:
    """Top-1 accuracy in [0, 1]."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    logits = predict(model, dataset.images, quant_bits)
    return float(np.mean(logits.argmax(axis=1) == dataset.labels))

"""A small deterministic trainer and a synthetic two-class texture dataset."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from ..backbone import Model
from ..errors import DataError
from ..tensor import Param
from .gradcheck import cross_entropy


class AdamW:
    """Adaptive-moment update with decoupled weight decay.

    Decay applies only to weights with two or more dimensions; biases, norm
    affines and 1-D vectors are left alone.
    """

    def __init__(self, params: list[tuple[str, Param]], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.05):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for _, p in self.params]
        self.v = [np.zeros_like(p.value) for _, p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and p.value.ndim >= 2:
                p.value *= 1.0 - self.lr * self.weight_decay
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: Model
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)


def _check_labels(labels: np.ndarray, num_classes: int):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be a 1-D integer array, got {labels.dtype} {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label out of range [0, {num_classes}): min {labels.min()}, max {labels.max()}")


def train_steps(model: Model, batches: Iterable, steps: int, lr: float = 1e-3,
                weight_decay: float = 0.05, seed: int = 0) -> TrainResult:
    """Train a copy of ``model`` for ``steps`` updates.

    ``batches`` yields ``(images, labels)``. The returned trajectory records the
    loss and accuracy of each batch before its update. The input model is not
    modified; the trained copy is ``result.model``.
    """
    net = copy.deepcopy(model)
    opt = AdamW(net.named_params(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    result = TrainResult(net)
    it = iter(batches)
    n_cls = net.config.num_classes
    for step in range(steps):
        try:
            images, labels = next(it)
        except StopIteration:
            raise DataError(f"batch iterator ran out after {step} of {steps} steps") from None
        _check_labels(labels, n_cls)
        net.zero_grad()
        logits, cache = net.forward(images, training=True, rng=rng)
        loss, g = cross_entropy(logits, labels)
        net.backward(cache, g)
        opt.step()
        result.losses.append(loss)
        result.accuracies.append(float((logits.argmax(axis=1) == labels).mean()))
    return result


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, batch_size: int = 16):
    """(mean loss, accuracy) over a dataset, in inference mode."""
    _check_labels(labels, model.config.num_classes)
    losses, correct = [], 0
    for i in range(0, len(images), batch_size):
        logits, _ = model.forward(images[i:i + batch_size])
        y = labels[i:i + batch_size]
        losses.append(cross_entropy(logits, y)[0] * len(y))
        correct += int((logits.argmax(axis=1) == y).sum())
    return float(sum(losses) / len(images)), correct / len(images)


# --------------------------------------------------------------- toy data

BANDS = ((1.0, 4.0), (8.0, 16.0))  # radial frequency bands in cycles per image


def texture_dataset(n: int, size: int = 64, channels: int = 3, seed: int = 0):
    """Band-limited Gaussian noise images; the class sets the frequency band.

    Returns ``(images n x size x size x channels, labels n)`` with balanced,
    shuffled labels and every image standardized to zero mean, unit variance.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % len(BANDS)
    rng.shuffle(labels)
    fy = np.fft.fftfreq(size)[:, None] * size
    fx = np.fft.rfftfreq(size)[None, :] * size
    radius = np.hypot(fy, fx)
    images = np.empty((n, size, size, channels))
    for i, y in enumerate(labels):
        lo, hi = BANDS[y]
        mask = (radius >= lo) & (radius <= hi)
        noise = rng.standard_normal((channels, size, size))
        img = np.fft.irfft2(np.fft.rfft2(noise) * mask, s=(size, size))
        img = (img - img.mean()) / img.std()
        images[i] = img.transpose(1, 2, 0)
    return images, labels


def minibatches(images: np.ndarray, labels: np.ndarray, batch_size: int, seed: int = 0) -> Iterator:
    """Endless reshuffled passes over the dataset."""
    rng = np.random.default_rng(seed)
    n = len(images)
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            idx = order[i:i + batch_size]
            yield images[idx], labels[idx]

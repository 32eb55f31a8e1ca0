"""Losses, P x K batch sampling and momentum SGD with cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .tensor import Tensor, log_softmax, softplus

# supervised with cross-entropy + triplet (weight 1/|group| each)
FULL_TAPS = ("F_g", "F_l", "F_cls")


@dataclass(frozen=True)
class BatchSpec:
    P: int = 8
    K: int = 4

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError(f"P x K sampling needs P >= 2 and K >= 2, got {self.P} x {self.K}")

    @property
    def B(self) -> int:
        return self.P * self.K


@dataclass
class LossReport:
    total: Tensor
    ce: dict[str, float] = field(default_factory=dict)
    triplet: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def components(self) -> dict[str, float]:
        out = {f"ce_{k}": v for k, v in self.ce.items()}
        out.update({f"tri_{k}": v for k, v in self.triplet.items()})
        return out

    def recompute(self) -> float:
        """Weighted sum of the logged parts, independent of the tape."""
        total = 0.0
        for name, w in self.weights.items():
            total += w * (self.ce[name] + self.triplet.get(name, 0.0))
        return total


def cross_entropy(features: Tensor, labels, classifier: Tensor) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(features @ classifier)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = classifier.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range {labels.min()}..{labels.max()}")
    logp = log_softmax(features @ classifier, axis=-1)
    return -logp[np.arange(len(labels)), labels].mean()


def hardest_pairs(sq_dist: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per anchor: index of the farthest positive and the nearest negative."""
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    pos = np.where(same, sq_dist, -np.inf).argmax(axis=1)
    neg = np.where(diff, sq_dist, np.inf).argmin(axis=1)
    return pos, neg


def triplet_loss(features: Tensor, labels) -> Tensor:
    """Batch-hard soft-margin triplet loss on squared Euclidean distances."""
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise ValueError("triplet loss needs at least two identities in the batch")
    if counts.min() < 2:
        raise ValueError(f"identity {ids[counts.argmin()]} has a single sample; triplets need two")
    f = features.data.astype(np.float64)
    sq = ((f[:, None, :] - f[None, :, :]) ** 2).sum(-1)
    pos, neg = hardest_pairs(sq, labels)
    d_ap = ((features - features[pos]) ** 2).sum(axis=-1)
    d_an = ((features - features[neg]) ** 2).sum(axis=-1)
    return softplus(d_ap - d_an).mean()


def loss_weights(tap_names) -> dict[str, float]:
    """1/|group| within the full-supervision group and the class-token group."""
    full = [t for t in tap_names if t in FULL_TAPS]
    extra = [t for t in tap_names if t not in FULL_TAPS]
    weights = {t: 1.0 / len(full) for t in full}
    weights.update({t: 1.0 / len(extra) for t in extra})
    return weights


def total_loss(taps: dict[str, Tensor], labels, classifiers: dict[str, Tensor]) -> LossReport:
    """Weighted sum of per-tap losses.

    ``F_g``, ``F_l`` and ``F_cls`` get cross-entropy plus triplet; any other
    tap (intermediate class tokens) gets cross-entropy only. Each group's
    weights are 1/(members present).
    """
    if not taps:
        raise ValueError("no supervised taps")
    weights = loss_weights(list(taps))
    report = LossReport(total=None, weights=weights)  # type: ignore[arg-type]
    total = None
    for name, feat in taps.items():
        term = cross_entropy(feat, labels, classifiers[name])
        report.ce[name] = term.item()
        if name in FULL_TAPS:
            tri = triplet_loss(feat, labels)
            report.triplet[name] = tri.item()
            term = term + tri
        term = term * weights[name]
        total = term if total is None else total + term
    report.total = total
    return report


class PKSampler:
    """Deterministic P identities x K images batches.

    Each epoch, every identity's images are shuffled and cut into chunks of
    K (topped up by resampling when fewer than K remain). Batches then take
    P distinct identities that still hold chunks, until fewer than P do.
    """

    def __init__(self, labels, spec: BatchSpec, seed: int = 0):
        self.labels = np.asarray(labels)
        self.spec = spec
        self.seed = seed
        ids = np.unique(self.labels)
        if len(ids) < 2:
            raise ValueError("P x K sampling needs at least two identities")
        if len(ids) < spec.P:
            raise ValueError(f"only {len(ids)} identities for P={spec.P}")
        self.index = {int(i): np.flatnonzero(self.labels == i) for i in ids}

    def epoch(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.seed, epoch])
        k = self.spec.K
        chunks: dict[int, list[np.ndarray]] = {}
        for pid, idx in self.index.items():
            idx = rng.permutation(idx)
            if len(idx) < k:
                idx = np.concatenate([idx, rng.choice(idx, k - len(idx), replace=True)])
            usable = len(idx) - len(idx) % k
            chunks[pid] = [idx[i : i + k] for i in range(0, usable, k)]
        batches = []
        while True:
            avail = [pid for pid, c in chunks.items() if c]
            if len(avail) < self.spec.P:
                break
            chosen = rng.choice(avail, self.spec.P, replace=False)
            batches.append(np.concatenate([chunks[int(pid)].pop() for pid in chosen]))
        return batches


def make_batches(labels, spec: BatchSpec, seed: int = 0, epochs: int = 1) -> Iterator[np.ndarray]:
    sampler = PKSampler(labels, spec, seed)
    for e in range(epochs):
        yield from sampler.epoch(e)


def cosine_lr(base_lr: float, epoch: float, total_epochs: int) -> float:
    if total_epochs <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(epoch, total_epochs) / total_epochs))


@dataclass
class OptimState:
    base_lr: float = 8e-3
    total_epochs: int = 200
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epoch: int = 0
    buffers: dict[int, np.ndarray] = field(default_factory=dict)  # keyed by id(param)

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.epoch, self.total_epochs)


def sgd_step(params: list[Tensor], state: OptimState) -> None:
    """One momentum-SGD update with L2 weight decay, in place."""
    lr = state.lr
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or i} has no gradient")
        g = p.grad + state.weight_decay * p.data if state.weight_decay else p.grad
        if state.momentum:
            buf = state.buffers.get(id(p))
            buf = g.copy() if buf is None else state.momentum * buf + g
            state.buffers[id(p)] = buf
            g = buf
        p.data = (p.data - lr * g).astype(p.data.dtype)

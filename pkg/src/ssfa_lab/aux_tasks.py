"""Self-supervised objectives: rotation prediction, NT-Xent contrastive, entropy minimisation.

Each task exposes per-sample losses so callers can form the sums of the
joint auxiliary objective as well as plain batch means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, l2_normalize, log_softmax, matmul, mean, mul,
                       neg_entropy, reshape, scale, sum as tsum, transpose)
from .data import rotate_batch, weak_aug_batch
from .model import ModelParams, aux_forward, encode

TASKS = ("rot", "simclr", "em")


def _onehot(idx, n_cols):
    out = np.zeros((len(idx), n_cols))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row cross-entropy against integer targets (or a dense target matrix)."""
    targets = np.asarray(targets)
    dense = targets if targets.ndim == 2 else _onehot(targets, logits.shape[1])
    return -tsum(mul(log_softmax(logits), Tensor(dense)), axis=1)


def _check_square(x):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise ValueError(f"expected a batch of square glyphs, got shape {x.shape}")
    return x


def rot_per_sample(x, params: ModelParams, rng, grad_layers: int | None = None,
                   ks: np.ndarray | None = None) -> Tensor:
    x = _check_square(x)
    if ks is None:
        ks = rng.integers(0, 4, len(x))
    feat = encode(rotate_batch(x, ks), params, grad_layers)
    return cross_entropy_rows(aux_forward(feat, params, "rot"), ks)


def nt_xent_rows(z: Tensor, temperature: float = 0.5) -> Tensor:
    """Per-sample NT-Xent for stacked views ``z = [view1; view2]`` (2n rows).

    Each sample's loss is the mean over its two anchors.
    """
    two_n = z.shape[0]
    n = two_n // 2
    zn = l2_normalize(z)
    sim = scale(matmul(zn, transpose(zn)), 1.0 / temperature)
    sim = add(sim, Tensor(np.diag(np.full(two_n, -1e9))))
    pos = np.zeros((two_n, two_n))
    pos[np.arange(n), np.arange(n) + n] = 1.0
    pos[np.arange(n) + n, np.arange(n)] = 1.0
    anchors = -tsum(mul(log_softmax(sim), Tensor(pos)), axis=1)
    pair = np.hstack([np.eye(n), np.eye(n)]) * 0.5
    return reshape(matmul(Tensor(pair), reshape(anchors, (two_n, 1))), (n,))


def contrastive_per_sample(x, params: ModelParams, rng, grad_layers: int | None = None,
                           temperature: float = 0.5) -> Tensor:
    x = np.asarray(x)
    if len(x) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 (no negatives otherwise)")
    v1 = weak_aug_batch(x, rng)
    v2 = weak_aug_batch(x, rng)
    feat = encode(np.concatenate([v1, v2]), params, grad_layers)
    return nt_xent_rows(aux_forward(feat, params, "simclr"), temperature)


def entropy_per_sample(x, params: ModelParams, rng=None, grad_layers: int | None = None) -> Tensor:
    feat = encode(np.asarray(x), params, grad_layers)
    return -neg_entropy(aux_forward(feat, params, "em"))


@dataclass(frozen=True)
class AuxTask:
    kind: str = "rot"
    temperature: float = 0.5

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"aux_task must be one of {TASKS}, got {self.kind!r}")

    @property
    def reads(self) -> str:
        return "main_head" if self.kind == "em" else "aux_head"

    def per_sample(self, x, params, rng, grad_layers=None) -> Tensor:
        if self.kind == "rot":
            return rot_per_sample(x, params, rng, grad_layers)
        if self.kind == "simclr":
            return contrastive_per_sample(x, params, rng, grad_layers, self.temperature)
        return entropy_per_sample(x, params, rng, grad_layers)

    def loss(self, x, params, rng, grad_layers=None) -> Tensor:
        return mean(self.per_sample(x, params, rng, grad_layers))


def rot_loss(x, params, rng, grad_layers=None) -> Tensor:
    return mean(rot_per_sample(x, params, rng, grad_layers))


def contrastive_loss(x, params, rng, grad_layers=None, temperature=0.5) -> Tensor:
    return mean(contrastive_per_sample(x, params, rng, grad_layers, temperature))


def entropy_loss(x, params, grad_layers=None) -> Tensor:
    return mean(entropy_per_sample(x, params, None, grad_layers))


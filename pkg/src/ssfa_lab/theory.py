"""Convex descent checks and the two feature-space diagnostics.

The convex checks use quadratic losses so the smoothness and gradient
bounds are exact.  ``ipp_scatter`` pairs the main/self-supervised gradient
inner product of a sample group with the accuracy change one adaptation
step buys on it; ``a_distance`` is the proxy divergence from a linear
domain classifier.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .adaptation import gradient_inner_product, one_step_adapt
from .aux_tasks import AuxTask
from .model import features_numpy, forward_numpy

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ convex checks

@dataclass(frozen=True)
class QuadraticPair:
    """l_m(h) = c_m/2 |h - a|^2 and l_s(h) = c_s/2 |h - b|^2 on the ball |h| <= R."""

    a: np.ndarray
    b: np.ndarray
    c_m: float = 1.0
    c_s: float = 1.0
    R: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "a", np.atleast_1d(np.asarray(self.a, dtype=np.float64)))
        object.__setattr__(self, "b", np.atleast_1d(np.asarray(self.b, dtype=np.float64)))
        if self.a.shape != self.b.shape:
            raise ValueError(f"a and b differ in shape: {self.a.shape} vs {self.b.shape}")
        if self.c_m <= 0 or self.c_s <= 0 or self.R <= 0:
            raise ValueError("curvatures and radius must be positive")

    @property
    def beta(self) -> float:
        return max(self.c_m, self.c_s)

    @property
    def G(self) -> float:
        return self.beta * (self.R + max(np.linalg.norm(self.a), np.linalg.norm(self.b)))

    def main(self, h):
        return 0.5 * self.c_m * float(np.sum((h - self.a) ** 2))

    def self_loss(self, h):
        return 0.5 * self.c_s * float(np.sum((h - self.b) ** 2))

    def grad_main(self, h):
        return self.c_m * (h - self.a)

    def grad_self(self, h):
        return self.c_s * (h - self.b)

    @classmethod
    def random(cls, rng, d: int | None = None) -> "QuadraticPair":
        d = d or int(rng.integers(1, 9))
        return cls(rng.normal(size=d), rng.normal(size=d), float(rng.uniform(0.1, 3.0)),
                   float(rng.uniform(0.1, 3.0)), float(rng.uniform(0.5, 4.0)))


@dataclass
class DescentVerdict:
    condition_held: bool
    decrease_held: bool | None
    inner: float
    eta: float
    main_before: float
    main_after: float | None
    eta_limit: float | None

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in
                ("condition_held", "decrease_held", "inner", "eta", "main_before", "main_after", "eta_limit")}


def _check_ball(h, R):
    if np.linalg.norm(h) > R * (1 + 1e-12):
        raise ValueError(f"h0 lies outside the feasible ball (|h0| = {np.linalg.norm(h):.4g} > R = {R})")


def _descent(g_m, g_s, main_fn, h0, eps, beta, G, curvature_m):
    inner = float(np.vdot(g_m, g_s))
    eta = eps / (beta * G ** 2)
    before = main_fn(h0)
    if not inner > eps:
        return DescentVerdict(False, None, inner, eta, before, None, None)
    after = main_fn(h0 - eta * g_s)
    # main loss along -g_s is a parabola in eta with roots 0 and this value
    limit = 2.0 * inner / (curvature_m * float(np.vdot(g_s, g_s)))
    return DescentVerdict(True, after < before, inner, eta, before, after, limit)


def lemma1_check(pair: QuadraticPair, h0, eps: float) -> DescentVerdict:
    """One self-supervised step of size eps / (beta G^2); report whether the main loss fell."""
    h0 = np.atleast_1d(np.asarray(h0, dtype=np.float64))
    _check_ball(h0, pair.R)
    return _descent(pair.grad_main(h0), pair.grad_self(h0), pair.main, h0, eps,
                    pair.beta, pair.G, pair.c_m)


@dataclass(frozen=True)
class QuadraticDataset:
    """Per-sample losses c_m/2 |h - y_i|^2 (main) and c_s/2 |h - u_i|^2 (self)."""

    u: np.ndarray
    y: np.ndarray
    c_m: float = 1.0
    c_s: float = 1.0
    R: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_2d(np.asarray(self.u, dtype=np.float64)))
        object.__setattr__(self, "y", np.atleast_2d(np.asarray(self.y, dtype=np.float64)))
        if self.u.shape != self.y.shape or len(self.u) == 0:
            raise ValueError("u and y must be nonempty and equal in shape")

    @property
    def beta(self) -> float:
        return max(self.c_m, self.c_s)

    @property
    def G(self) -> float:
        radius = max(np.linalg.norm(self.u, axis=1).max(), np.linalg.norm(self.y, axis=1).max())
        return self.beta * (self.R + radius)

    def risk_main(self, h):
        return 0.5 * self.c_m * float(np.mean(np.sum((h - self.y) ** 2, axis=1)))

    def grad_main(self, h):
        return self.c_m * (h - self.y).mean(axis=0)

    def grad_self(self, h):
        return self.c_s * (h - self.u).mean(axis=0)


def empirical_risk_check(dataset: QuadraticDataset, h, eps: float) -> DescentVerdict:
    h = np.atleast_1d(np.asarray(h, dtype=np.float64))
    _check_ball(h, dataset.R)
    return _descent(dataset.grad_main(h), dataset.grad_self(h), dataset.risk_main, h, eps,
                    dataset.beta, dataset.G, dataset.c_m)


def _random_h(rng, d, R):
    h = rng.normal(size=d)
    return h / np.linalg.norm(h) * R * rng.uniform() ** (1.0 / d)


def lemma1_trials(n: int, seed: int = 0, eps_frac: float = 0.5):
    """Random pairs with eps set below the realised inner product; returns (pair, h0, verdict) rows.

    Instances whose inner product is not positive are redrawn, so every row
    satisfies the condition.
    """
    rng = np.random.default_rng(seed)
    rows = []
    while len(rows) < n:
        pair = QuadraticPair.random(rng)
        h0 = _random_h(rng, len(pair.a), pair.R)
        inner = float(np.vdot(pair.grad_main(h0), pair.grad_self(h0)))
        if inner <= 0:
            continue
        verdict = lemma1_check(pair, h0, eps_frac * inner)
        rows.append((pair, h0, verdict))
    return rows


def empirical_trials(n: int, seed: int = 0, eps_frac: float = 0.5):
    rng = np.random.default_rng(seed)
    rows = []
    while len(rows) < n:
        d, m = int(rng.integers(1, 7)), int(rng.integers(1, 20))
        shift = rng.normal(size=d)
        data = QuadraticDataset(rng.normal(size=(m, d)) + shift, rng.normal(size=(m, d)) + shift,
                                float(rng.uniform(0.1, 3.0)), float(rng.uniform(0.1, 3.0)),
                                float(rng.uniform(0.5, 4.0)))
        h = _random_h(rng, d, data.R)
        inner = float(np.vdot(data.grad_main(h), data.grad_self(h)))
        if inner <= 0:
            continue
        rows.append((data, h, empirical_risk_check(data, h, eps_frac * inner)))
    return rows


# ------------------------------------------------------------------ gradient inner product

@dataclass(frozen=True)
class IppSample:
    group_id: str
    ipp: float
    improvement: float


def group_test_samples(bundle, group_size: int = 64, min_size: int = 16):
    """Split every test set by (domain tag, consecutive chunk of ``group_size``).

    Yields (group id, pixels, labels); chunks under ``min_size`` are skipped.
    """
    for protocol in ("L", "UL", "US"):
        split = bundle.test_set(protocol)
        for tag in np.unique(split.domains):
            idx = np.flatnonzero(split.domains == tag)
            for start in range(0, len(idx), group_size):
                chunk = idx[start:start + group_size]
                gid = f"{protocol}:{int(tag)}:{start // group_size}"
                if len(chunk) < min_size:
                    log.info("ipp group %s skipped: %d samples < %d", gid, len(chunk), min_size)
                    continue
                yield gid, split.pixels[chunk], split.labels[chunk]


def ipp_sample(params, x, labels, task: AuxTask, lr_adapt: float, seed: int, group_id="g"):
    """Inner product and accuracy delta after one adaptation step on one group.

    Both use rng streams derived from ``seed`` alone, so a repeated group
    reproduces its sample exactly.
    """
    ipp = gradient_inner_product(params, x, labels, task, np.random.default_rng([seed, 0]))
    before = np.mean(np.argmax(forward_numpy(x, params.encoder, params.main_head), axis=1) == labels)
    scratch, _, _ = one_step_adapt(params, x, task, lr_adapt, np.random.default_rng([seed, 1]))
    encoder = scratch + params.encoder[len(scratch):]
    after = np.mean(np.argmax(forward_numpy(x, encoder, params.main_head), axis=1) == labels)
    return IppSample(group_id, float(ipp), float(after - before))


def ipp_scatter(params, groups, task: AuxTask, lr_adapt: float, seed: int = 0) -> list[IppSample]:
    """``groups`` is an iterable of (group id, pixels, hidden labels)."""
    out = []
    for i, (gid, x, y) in enumerate(groups):
        if len(x) < 16:
            log.info("ipp group %s skipped: only %d samples", gid, len(x))
            continue
        out.append(ipp_sample(params, x, y, task, lr_adapt, seed + i, gid))
    return out


def spearman(samples) -> float:
    ipp = [s.ipp for s in samples]
    imp = [s.improvement for s in samples]
    if len(samples) < 3 or np.ptp(ipp) == 0 or np.ptp(imp) == 0:
        return float("nan")
    return float(stats.spearmanr(ipp, imp).statistic)


# ------------------------------------------------------------------ A-distance

def a_distance(feat_a, feat_b, epochs: int = 200, lr: float = 0.1, seed: int = 0) -> float:
    """2 (1 - 2 err) of a logistic domain classifier, clamped to [0, 2].

    Features are standardised with the pooled mean and std and each side is
    split into train/validation halves.  Each epoch is one gradient step on
    the full training half, with both sides weighted equally, and ``err`` is
    the class-balanced validation error.  A side's split depends only on its
    size and ``seed``, so swapping the two sets flips the classifier's sign
    and leaves the value unchanged.
    """
    a = np.asarray(feat_a, dtype=np.float64)
    b = np.asarray(feat_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"a_distance: feature shapes {a.shape} and {b.shape} do not match")
    if min(len(a), len(b)) < 50:
        raise ValueError("a_distance needs at least 50 feature vectors per side")
    pooled = np.concatenate([a, b])
    std = pooled.std(axis=0)
    keep = std > 1e-12
    if not keep.any():
        log.warning("a_distance: degenerate (constant) features, returning 0")
        return 0.0
    mu = pooled.mean(axis=0)
    a, b = (a[:, keep] - mu[keep]) / std[keep], (b[:, keep] - mu[keep]) / std[keep]

    pa = np.random.default_rng([seed, len(a)]).permutation(len(a))
    pb = np.random.default_rng([seed, len(b)]).permutation(len(b))
    ha, hb = len(a) // 2, len(b) // 2
    tr_a, tr_b = a[pa[:ha]], b[pb[:hb]]

    w, c = np.zeros(a.shape[1]), 0.0
    for _ in range(epochs):
        # label 0 for side a, 1 for side b; each side carries half the weight
        ra = 1.0 / (1.0 + np.exp(-np.clip(tr_a @ w + c, -30, 30)))
        rb = 1.0 / (1.0 + np.exp(-np.clip(tr_b @ w + c, -30, 30))) - 1.0
        w -= lr * 0.5 * (tr_a.T @ ra / ha + tr_b.T @ rb / hb)
        c -= lr * 0.5 * (ra.mean() + rb.mean())

    err_a = np.mean(a[pa[ha:]] @ w + c > 0)
    err_b = np.mean(b[pb[hb:]] @ w + c < 0)
    err = 0.5 * (err_a + err_b)
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


def feature_a_distance(params, bundle, seed: int = 0) -> float:
    """A-distance between encoder features of the labeled-distribution and unlabeled-distribution test sets."""
    return a_distance(features_numpy(bundle.test_L.pixels, params),
                      features_numpy(bundle.test_UL.pixels, params), seed=seed)

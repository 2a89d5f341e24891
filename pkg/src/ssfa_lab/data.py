"""Procedural glyph datasets with controllable feature-distribution mismatch.

Glyph classes are fixed multi-stroke drawings on a 16x16 grid.  Instances
jitter the strokes and placement; corruption domains perturb the pixels.
Training corruptions feed the unlabeled pool (and strong augmentation); the
five reserved kinds only ever appear in the unseen-domain test set.

Corruption severities (index = severity - 1)::

    gaussian_noise       sigma       0.08 0.14 0.20 0.28 0.38
    salt_pepper          prob        0.03 0.06 0.10 0.15 0.22
    box_blur             size        2    3    3    4    5     (size-3 used twice at sev 3)
    contrast             factor      0.60 0.45 0.35 0.25 0.15
    brightness           shift       0.15 0.25 0.35 0.45 0.55
    hband_occlusion      rows        2    3    4    5    6
    pixel_dropout        prob        0.10 0.20 0.30 0.40 0.50
    elastic_jitter       amplitude   0.5  0.8  1.1  1.4  1.8
    quantization         levels      6    4    3    2    2     (sev 5 also thresholds at 0.6)
    checkerboard         amplitude   0.10 0.17 0.24 0.31 0.40
    multiplicative_noise sigma       0.20 0.35 0.50 0.65 0.80
    vband_occlusion      cols        2    3    4    5    6
    gamma_warp           gamma       0.70 0.55 0.45 0.35 0.25
    row_shuffle          window      2    2    3    4    5     (fraction shuffled rises)
    ring_vignette        strength    0.25 0.40 0.55 0.70 0.85

Bundle file layout (little-endian)::

    magic      4s   b"SSFA"
    version    u32  1
    S          u32  grid side
    C          u32  number of classes
    counts     5 x u32   labeled, unlabeled, test_L, test_UL, test_US
    seed       u64
    K          u32  number of mixture corruption domains
    w0         f64
    weights    K x f64
    records    per sample, splits in the order above:
               pixels S*S x f32, label i32, domain_tag i32, hidden u8
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

S = 16

TRAIN_CORRUPTIONS = (
    "gaussian_noise", "salt_pepper", "box_blur", "contrast", "brightness",
    "hband_occlusion", "pixel_dropout", "elastic_jitter", "quantization", "checkerboard",
)
UNSEEN_CORRUPTIONS = (
    "multiplicative_noise", "vband_occlusion", "gamma_warp", "row_shuffle", "ring_vignette",
)
ALL_CORRUPTIONS = TRAIN_CORRUPTIONS + UNSEEN_CORRUPTIONS

# severity range used by strong augmentation (inclusive)
STRONG_SEVERITY = (1, 5)


# ------------------------------------------------------------------ glyphs

JITTER = {"angle": 0.15, "zoom": 0.1, "shift": 1.0, "endpoint": 0.5}

@dataclass
class Glyph:
    pixels: np.ndarray
    label: int
    domain_tag: int = 0


def _segment_distance(yy, xx, p, q):
    d = q - p
    t = ((yy - p[0]) * d[0] + (xx - p[1]) * d[1]) / max(float(d @ d), 1e-9)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(yy - (p[0] + t * d[0]), xx - (p[1] + t * d[1]))


def render_strokes(strokes, size: int = S, thickness: float = 1.3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size))
    for p, q in strokes:
        d = _segment_distance(yy, xx, np.asarray(p, float), np.asarray(q, float))
        img = np.maximum(img, np.clip(thickness / 2 + 0.5 - d, 0.0, 1.0))
    return img


def _binary_diff(a, b):
    return float(np.mean((a > 0.5) != (b > 0.5)))


def _is_asymmetric(img, min_frac=0.05):
    return all(_binary_diff(img, np.rot90(img, k)) >= min_frac for k in (1, 2, 3))


def class_prototypes(n_classes: int, size: int = S, seed: int = 7):
    """Stroke sets for each class, fixed across bundles.

    Candidates are rejected until each differs from its own rotations and
    from every other class (and that class's mirror image).
    """
    rng = np.random.default_rng([seed, n_classes, size])
    protos, images = [], []
    lo, hi = 2.5, size - 3.5
    while len(protos) < n_classes:
        strokes = []
        for _ in range(3):
            p = rng.uniform(lo, hi, 2)
            q = rng.uniform(lo, hi, 2)
            if np.hypot(*(q - p)) < size / 3:
                q = p + (q - p) * (size / 3) / max(np.hypot(*(q - p)), 1e-6)
                q = np.clip(q, lo, hi)
            strokes.append((p, q))
        img = render_strokes(strokes, size)
        if not _is_asymmetric(img):
            continue
        if any(min(_binary_diff(img, o), _binary_diff(img, o[:, ::-1])) < 0.12 for o in images):
            continue
        protos.append(strokes)
        images.append(img)
    return protos


def render_instance(strokes, rng, size: int = S) -> np.ndarray:
    """One jittered drawing of a class: stroke noise, small affine, intensity."""
    c = (size - 1) / 2
    angle = rng.uniform(-JITTER["angle"], JITTER["angle"])
    zoom = rng.uniform(1 - JITTER["zoom"], 1 + JITTER["zoom"])
    shift = rng.uniform(-JITTER["shift"], JITTER["shift"], 2)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) * zoom
    moved = []
    for p, q in strokes:
        p = rot @ (np.asarray(p) - c) + c + shift + rng.normal(0, JITTER["endpoint"], 2)
        q = rot @ (np.asarray(q) - c) + c + shift + rng.normal(0, JITTER["endpoint"], 2)
        moved.append((p, q))
    img = render_strokes(moved, size, thickness=rng.uniform(1.0, 1.6))
    img = img * rng.uniform(0.75, 1.0) + rng.normal(0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0)


# ------------------------------------------------------------ corruptions
# Each corruption maps a batch (n, S, S) with per-sample severities (n,) to
# a new batch.  Callers clamp to [0, 1].

def _per_sample(values, sev):
    return np.asarray(values, dtype=np.float64)[np.asarray(sev) - 1]


def gaussian_noise(x, sigma, rng):
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1, 1)
    return x + rng.normal(size=x.shape) * sigma


def _c_gaussian(x, sev, rng):
    return gaussian_noise(x, _per_sample([0.08, 0.14, 0.20, 0.28, 0.38], sev), rng)


def _c_salt_pepper(x, sev, rng):
    p = _per_sample([0.03, 0.06, 0.10, 0.15, 0.22], sev).reshape(-1, 1, 1)
    u = rng.random(x.shape)
    salt = rng.random(x.shape) < 0.5
    out = x.copy()
    hit = u < p
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def _c_box_blur(x, sev, rng):
    out = x.copy()
    sizes = {1: (2,), 2: (3,), 3: (3, 3), 4: (4, 3), 5: (5, 3)}
    for s in np.unique(sev):
        idx = np.flatnonzero(sev == s)
        y = x[idx]
        for k in sizes[int(s)]:
            y = ndimage.uniform_filter(y, size=(1, k, k), mode="constant")
        out[idx] = y
    return out


def _c_contrast(x, sev, rng):
    c = _per_sample([0.60, 0.45, 0.35, 0.25, 0.15], sev).reshape(-1, 1, 1)
    m = x.mean(axis=(1, 2), keepdims=True)
    return (x - m) * c + m


def _c_brightness(x, sev, rng):
    return x + _per_sample([0.15, 0.25, 0.35, 0.45, 0.55], sev).reshape(-1, 1, 1)


def _band_mask(n, size, widths, rng, axis):
    start = rng.integers(0, size - widths + 1)
    pos = np.arange(size)
    band = (pos[None, :] >= start[:, None]) & (pos[None, :] < (start + widths)[:, None])
    if axis == 0:
        return np.broadcast_to(band[:, :, None], (n, size, size))
    return np.broadcast_to(band[:, None, :], (n, size, size))


def _c_hband(x, sev, rng):
    w = _per_sample([2, 3, 4, 5, 6], sev).astype(int)
    mask = _band_mask(len(x), x.shape[1], w, rng, axis=0)
    fill = rng.uniform(0.5, 1.0, (len(x), 1, 1))
    return np.where(mask, fill, x)


def _c_dropout(x, sev, rng):
    p = _per_sample([0.10, 0.20, 0.30, 0.40, 0.50], sev).reshape(-1, 1, 1)
    return np.where(rng.random(x.shape) < p, 0.0, x)


def _c_elastic(x, sev, rng):
    n, h, w = x.shape
    amp = _per_sample([0.5, 0.8, 1.1, 1.4, 1.8], sev).reshape(-1, 1, 1)
    dy = ndimage.gaussian_filter(rng.normal(size=x.shape), sigma=(0, 2, 2)) * 4 * amp
    dx = ndimage.gaussian_filter(rng.normal(size=x.shape), sigma=(0, 2, 2)) * 4 * amp
    nn, yy, xx = np.meshgrid(np.arange(n), np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([nn, yy + dy, xx + dx]).astype(np.float64)
    return ndimage.map_coordinates(x, coords, order=1, mode="constant")


def _c_quantize(x, sev, rng):
    levels = _per_sample([6, 4, 3, 2, 2], sev).reshape(-1, 1, 1)
    out = np.round(np.clip(x, 0, 1) * (levels - 1)) / (levels - 1)
    harsh = (np.asarray(sev) == 5).reshape(-1, 1, 1)
    return np.where(harsh, (x > 0.6).astype(np.float64), out)


def _checker(size, cell=2):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.where(((yy // cell) + (xx // cell)) % 2 == 0, 1.0, -1.0)


def _c_checker(x, sev, rng):
    a = _per_sample([0.10, 0.17, 0.24, 0.31, 0.40], sev).reshape(-1, 1, 1)
    phase = np.where(rng.random((len(x), 1, 1)) < 0.5, 1.0, -1.0)
    return x + a * phase * _checker(x.shape[1]) + a / 2


def _c_multiplicative(x, sev, rng):
    s = _per_sample([0.20, 0.35, 0.50, 0.65, 0.80], sev).reshape(-1, 1, 1)
    return x * (1.0 + rng.normal(size=x.shape) * s) + 0.1 * s * rng.random(x.shape)


def _c_vband(x, sev, rng):
    w = _per_sample([2, 3, 4, 5, 6], sev).astype(int)
    mask = _band_mask(len(x), x.shape[2], w, rng, axis=1)
    fill = rng.uniform(0.5, 1.0, (len(x), 1, 1))
    return np.where(mask, fill, x)


def _c_gamma(x, sev, rng):
    g = _per_sample([0.70, 0.55, 0.45, 0.35, 0.25], sev).reshape(-1, 1, 1)
    return np.clip(x, 0, 1) ** g


def _c_row_shuffle(x, sev, rng):
    out = x.copy()
    n, h, _ = x.shape
    windows = _per_sample([2, 2, 3, 4, 5], sev).astype(int)
    frac = _per_sample([0.5, 1.0, 1.0, 1.0, 1.0], sev)
    for i in range(n):
        w = windows[i]
        for start in range(0, h, w):
            if rng.random() < frac[i]:
                rows = np.arange(start, min(start + w, h))
                out[i, rows] = x[i, rng.permutation(rows)]
    return out


def _c_vignette(x, sev, rng):
    size = x.shape[1]
    c = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size]
    r = np.hypot(yy - c, xx - c) / (c * np.sqrt(2))
    a = _per_sample([0.25, 0.40, 0.55, 0.70, 0.85], sev).reshape(-1, 1, 1)
    ring = np.exp(-((r - 0.75) ** 2) / 0.01)
    return x * (1 - a * r ** 2) + 0.6 * a * ring


CORRUPTION_FNS: dict[str, Callable] = dict(zip(ALL_CORRUPTIONS, (
    _c_gaussian, _c_salt_pepper, _c_box_blur, _c_contrast, _c_brightness,
    _c_hband, _c_dropout, _c_elastic, _c_quantize, _c_checker,
    _c_multiplicative, _c_vband, _c_gamma, _c_row_shuffle, _c_vignette,
)))


def corrupt_batch(x: np.ndarray, kind: str, severity, rng) -> np.ndarray:
    if kind not in CORRUPTION_FNS:
        raise ValueError(f"unknown corruption kind {kind!r}")
    sev = np.broadcast_to(np.asarray(severity, dtype=int), (len(x),))
    if sev.size and (sev.min() < 1 or sev.max() > 5):
        raise ValueError(f"severity must be in 1..5, got {severity}")
    return np.clip(CORRUPTION_FNS[kind](x, sev, rng), 0.0, 1.0)


def corrupt(g: Glyph, kind: str, severity: int, rng) -> Glyph:
    out = corrupt_batch(g.pixels[None], kind, severity, rng)[0]
    return Glyph(out, g.label, g.domain_tag)


# ----------------------------------------------------------- augmentation

def weak_aug_batch(x: np.ndarray, rng, shift: int = 1, flip_prob: float = 0.5) -> np.ndarray:
    """Random shift of up to ``shift`` pixels (zero fill) and horizontal flip."""
    n, h, w = x.shape
    dy = rng.integers(-shift, shift + 1, n)
    dx = rng.integers(-shift, shift + 1, n)
    flip = rng.random(n) < flip_prob
    pad = np.pad(x, ((0, 0), (shift, shift), (shift, shift)))
    rows = (np.arange(h)[None, :] + shift - dy[:, None])
    cols = (np.arange(w)[None, :] + shift - dx[:, None])
    out = pad[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]
    out[flip] = out[flip][:, :, ::-1]
    return out


def weak_aug(g: Glyph, rng, **kw) -> Glyph:
    return Glyph(weak_aug_batch(g.pixels[None], rng, **kw)[0], g.label, g.domain_tag)


def cutout_batch(x: np.ndarray, rng, side: int | None = None, fill: float = 0.5) -> np.ndarray:
    n, h, w = x.shape
    side = side or h // 4
    y0 = rng.integers(0, h - side + 1, n)
    x0 = rng.integers(0, w - side + 1, n)
    rows = np.arange(h)[None, :]
    cols = np.arange(w)[None, :]
    rm = (rows >= y0[:, None]) & (rows < (y0 + side)[:, None])
    cm = (cols >= x0[:, None]) & (cols < (x0 + side)[:, None])
    return np.where(rm[:, :, None] & cm[:, None, :], fill, x)


def strong_aug_batch(x: np.ndarray, rng) -> np.ndarray:
    """Weak flip/shift, then two random training corruptions, then a cutout square."""
    out = weak_aug_batch(x, rng)
    n = len(x)
    k = len(TRAIN_CORRUPTIONS)
    picks = np.stack([rng.permutation(k)[:2] for _ in range(n)])
    sev = rng.integers(STRONG_SEVERITY[0], STRONG_SEVERITY[1] + 1, (n, 2))
    for slot in range(2):
        for j in np.unique(picks[:, slot]):
            idx = np.flatnonzero(picks[:, slot] == j)
            out[idx] = corrupt_batch(out[idx], TRAIN_CORRUPTIONS[j], sev[idx, slot], rng)
    return cutout_batch(out, rng)


def strong_aug(g: Glyph, rng) -> Glyph:
    return Glyph(strong_aug_batch(g.pixels[None], rng)[0], g.label, g.domain_tag)


def rotate90(g, k: int):
    """Rotate a glyph (or an (S, S) / (n, S, S) array) by k quarter turns clockwise."""
    pixels = g.pixels if isinstance(g, Glyph) else np.asarray(g)
    if pixels.shape[-1] != pixels.shape[-2]:
        raise ValueError(f"rotate90 needs a square grid, got {pixels.shape}")
    out = np.rot90(pixels, -int(k) % 4, axes=(-2, -1)).copy()
    return Glyph(out, g.label, g.domain_tag) if isinstance(g, Glyph) else out


def rotate_batch(x: np.ndarray, ks: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for k in range(4):
        idx = np.flatnonzero(ks == k)
        if idx.size:
            out[idx] = np.rot90(x[idx], -k, axes=(1, 2))
    return out


# ---------------------------------------------------------------- bundles

@dataclass(frozen=True)
class MixtureSpec:
    """Unlabeled-pool mixture: clean weight ``w0`` plus one weight per corruption domain."""

    w0: float
    weights: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if self.w0 < 0 or np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        if abs(self.w0 + w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights sum to {self.w0 + w.sum()}, expected 1")
        if len(w) > len(TRAIN_CORRUPTIONS):
            raise ValueError(f"at most {len(TRAIN_CORRUPTIONS)} corruption domains")

    @classmethod
    def from_ratio(cls, ratio: float, k: int = len(TRAIN_CORRUPTIONS)) -> "MixtureSpec":
        if not 0.0 <= ratio <= 1.0:
            raise ValueError(f"ratio must be in [0, 1], got {ratio}")
        return cls(1.0 - ratio, tuple([ratio / k] * k))

    @property
    def ratio(self) -> float:
        return 1.0 - self.w0

    @property
    def k(self) -> int:
        return len(self.weights)

    def probabilities(self) -> np.ndarray:
        p = np.array((self.w0,) + tuple(self.weights), dtype=np.float64)
        return p / p.sum()


@dataclass
class LabeledSet:
    pixels: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __len__(self):
        return len(self.labels)


class UnlabeledPool:
    """Unlabeled images; labels and domain tags travel along but stay hidden.

    Training code only reads ``pixels``.  Diagnostics call :meth:`reveal`,
    which counts each access and notifies ``audit_hook`` if one is set.
    """

    audit_hook: Callable[[str], None] | None = None

    def __init__(self, pixels, labels, domains):
        self.pixels = pixels
        self._labels = np.asarray(labels)
        self._domains = np.asarray(domains)
        self.reveal_count = 0

    def __len__(self):
        return len(self.pixels)

    def reveal(self, purpose: str = "diagnostic"):
        self.reveal_count += 1
        hook = UnlabeledPool.audit_hook
        if hook is not None:
            hook(purpose)
        return self._labels, self._domains


@dataclass
class DatasetBundle:
    labeled: LabeledSet
    unlabeled: UnlabeledPool
    test_L: LabeledSet
    test_UL: LabeledSet
    test_US: LabeledSet
    n_classes: int
    mixture: MixtureSpec
    seed: int
    size: int = S
    _hash: str | None = field(default=None, repr=False)

    def test_set(self, protocol: str) -> LabeledSet:
        try:
            return {"L": self.test_L, "UL": self.test_UL, "US": self.test_US}[protocol]
        except KeyError:
            raise ValueError(f"unknown test protocol {protocol!r}") from None

    @property
    def domain_names(self) -> list[str]:
        return ["clean"] + list(TRAIN_CORRUPTIONS[: self.mixture.k]) + list(UNSEEN_CORRUPTIONS)

    def digest(self) -> str:
        if self._hash is None:
            buf = io.BytesIO()
            write_bundle(self, buf)
            self._hash = hashlib.sha256(buf.getvalue()).hexdigest()[:16]
        return self._hash


def _balanced_labels(n, n_classes, rng):
    return rng.permutation(np.arange(n) % n_classes)


def _render_split(protos, labels, domains, seed, split_id, kinds):
    out = np.empty((len(labels), S, S))
    for i, (y, d) in enumerate(zip(labels, domains)):
        rng = np.random.default_rng([seed, split_id, i])
        img = render_instance(protos[y], rng)
        if d > 0:
            sev = int(rng.integers(1, 6))
            img = corrupt_batch(img[None], kinds[d - 1], sev, rng)[0]
        out[i] = img
    return out.astype(np.float32).astype(np.float64)


def make_bundle(n_labeled: int, n_unlabeled: int | None = None, n_classes: int = 10,
                mixture: MixtureSpec | None = None, seed: int = 0, mu_data: int = 10,
                n_test: int = 1000, n_test_ul: int | None = None) -> DatasetBundle:
    """Build labeled / mixed unlabeled / L, UL, US test splits.

    Domain tags: 0 clean, 1..K the mixture's corruption domains, K+1..K+5 the
    unseen kinds.  Every sample draws from its own ``(seed, split, index)``
    stream, so generation order does not matter.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    if n_unlabeled is None:
        n_unlabeled = mu_data * n_labeled
    if n_unlabeled < n_labeled:
        raise ValueError("n_unlabeled must be >= n_labeled")
    mixture = mixture or MixtureSpec.from_ratio(1.0)
    if not isinstance(mixture, MixtureSpec):
        raise TypeError("mixture must be a MixtureSpec")
    n_test_ul = n_test_ul or 2 * n_test
    protos = class_prototypes(n_classes)
    k = mixture.k
    kinds = list(TRAIN_CORRUPTIONS[:k]) + list(UNSEEN_CORRUPTIONS)
    probs = mixture.probabilities()
    rngs = [np.random.default_rng([seed, 99, j]) for j in range(5)]

    def mixed_tags(n, rng):
        return rng.choice(len(probs), size=n, p=probs)

    def unseen_tags(n, rng):
        return k + 1 + (np.arange(n) % len(UNSEEN_CORRUPTIONS))[rng.permutation(n)]

    def build(split_id, n, tagger):
        labels = _balanced_labels(n, n_classes, rngs[split_id])
        domains = tagger(n, rngs[split_id])
        pixels = _render_split(protos, labels, domains, seed, split_id, kinds)
        return pixels, labels, domains

    clean = lambda n, rng: np.zeros(n, dtype=int)  # noqa: E731
    lab = LabeledSet(*build(0, n_labeled, clean))
    upix, ulab, udom = build(1, n_unlabeled, mixed_tags)
    return DatasetBundle(
        labeled=lab,
        unlabeled=UnlabeledPool(upix, ulab, udom),
        test_L=LabeledSet(*build(2, n_test, clean)),
        test_UL=LabeledSet(*build(3, n_test_ul, mixed_tags)),
        test_US=LabeledSet(*build(4, n_test, unseen_tags)),
        n_classes=n_classes, mixture=mixture, seed=seed,
    )


# ------------------------------------------------------------- file format

MAGIC = b"SSFA"
VERSION = 1
_HEAD = struct.Struct("<4sIII5IQI")


def write_bundle(bundle: DatasetBundle, dst) -> None:
    """Serialise a bundle to a path or binary file object."""
    if isinstance(dst, (str, Path)):
        with open(dst, "wb") as fh:
            return write_bundle(bundle, fh)
    labels, domains = bundle.unlabeled._labels, bundle.unlabeled._domains
    splits = [
        (bundle.labeled.pixels, bundle.labeled.labels, bundle.labeled.domains, 0),
        (bundle.unlabeled.pixels, labels, domains, 1),
        (bundle.test_L.pixels, bundle.test_L.labels, bundle.test_L.domains, 0),
        (bundle.test_UL.pixels, bundle.test_UL.labels, bundle.test_UL.domains, 0),
        (bundle.test_US.pixels, bundle.test_US.labels, bundle.test_US.domains, 0),
    ]
    m = bundle.mixture
    dst.write(_HEAD.pack(MAGIC, VERSION, bundle.size, bundle.n_classes,
                         *(len(s[1]) for s in splits), bundle.seed, m.k))
    dst.write(struct.pack(f"<{m.k + 1}d", m.w0, *m.weights))
    rec = np.dtype([("px", "<f4", (bundle.size * bundle.size,)), ("label", "<i4"),
                    ("domain", "<i4"), ("hidden", "u1")])
    for pixels, lab, dom, hidden in splits:
        arr = np.empty(len(lab), dtype=rec)
        arr["px"] = pixels.reshape(len(lab), -1)
        arr["label"] = lab
        arr["domain"] = dom
        arr["hidden"] = hidden
        dst.write(arr.tobytes())


def read_bundle(src) -> DatasetBundle:
    if isinstance(src, (str, Path)):
        with open(src, "rb") as fh:
            return read_bundle(fh)
    head = src.read(_HEAD.size)
    if len(head) != _HEAD.size:
        raise ValueError("truncated bundle header")
    magic, version, size, n_classes, *rest = _HEAD.unpack(head)
    if magic != MAGIC:
        raise ValueError(f"not a bundle file (magic {magic!r})")
    if version != VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    counts, seed, k = rest[:5], rest[5], rest[6]
    w = struct.unpack(f"<{k + 1}d", src.read(8 * (k + 1)))
    rec = np.dtype([("px", "<f4", (size * size,)), ("label", "<i4"),
                    ("domain", "<i4"), ("hidden", "u1")])
    parts = []
    for n in counts:
        raw = src.read(n * rec.itemsize)
        if len(raw) != n * rec.itemsize:
            raise ValueError("truncated bundle records")
        arr = np.frombuffer(raw, dtype=rec)
        parts.append((arr["px"].astype(np.float64).reshape(n, size, size),
                      arr["label"].astype(np.int64), arr["domain"].astype(np.int64)))
    return DatasetBundle(
        labeled=LabeledSet(*parts[0]),
        unlabeled=UnlabeledPool(*parts[1]),
        test_L=LabeledSet(*parts[2]),
        test_UL=LabeledSet(*parts[3]),
        test_US=LabeledSet(*parts[4]),
        n_classes=n_classes, mixture=MixtureSpec(w[0], tuple(w[1:])), seed=seed, size=size,
    )

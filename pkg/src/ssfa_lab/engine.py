"""Pseudo-label semi-supervised training with a joint self-supervised task.

Per step: a weakly augmented labeled batch drives the supervised loss; the
unlabeled batch is pseudo-labelled from its weak views (directly, or via
feature adaptation) and the confident ones supervise the strong views; the
auxiliary loss covers raw labeled images plus both unlabeled views.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adaptation
from .autodiff import Tensor, backward, mul, scale, sgd_step, sum as tsum, mean
from .aux_tasks import AuxTask, cross_entropy_rows
from .data import DatasetBundle, strong_aug_batch, weak_aug_batch
from .model import ArchConfig, ModelParams, classify, encode, init_model

log = logging.getLogger(__name__)

LEARNERS = ("fixed_threshold", "adaptive_threshold")
STREAMS = {"init": 1, "order": 2, "augment": 3, "rot_joint": 4, "rot_adapt": 5}


class TrainingDiverged(RuntimeError):
    def __init__(self, step, components):
        self.step = step
        self.components = components
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")


@dataclass
class TrainConfig:
    B: int = 32
    mu: int = 3
    lambda_u: float = 1.0
    lambda_a: float = 0.5
    tau: float = 0.95
    lr_main: float = 0.15
    lr_adapt: float | None = None
    steps: int = 3000
    learner: str = "fixed_threshold"
    ssfa_enabled: bool = True
    aux_task: str = "rot"
    shared_count: int = 2
    seed: int = 0
    widths: tuple = (256, 256, 128, 128)
    labeled_aug: bool = True
    diag_ipp: bool = False

    def __post_init__(self):
        if self.lr_adapt is None:
            self.lr_adapt = self.lr_main
        self.widths = tuple(int(w) for w in self.widths)
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if int(self.mu) != self.mu or self.mu < 1:
            raise ValueError("mu must be an integer >= 1")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if self.lambda_u < 0 or self.lambda_a < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr_main <= 0 or self.lr_adapt < 0:
            raise ValueError("lr_main must be > 0 and lr_adapt >= 0")
        if self.learner not in LEARNERS:
            raise ValueError(f"learner must be one of {LEARNERS}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        AuxTask(self.aux_task)

    @property
    def task(self) -> AuxTask:
        return AuxTask(self.aux_task)

    def arch(self, n_classes: int, input_dim: int = 256) -> ArchConfig:
        return ArchConfig(input_dim=input_dim, widths=self.widths, n_classes=n_classes,
                          aux_task=self.aux_task, shared_count=self.shared_count)

    def replace(self, **kw) -> "TrainConfig":
        if "lr_main" in kw and "lr_adapt" not in kw and self.lr_adapt == self.lr_main:
            kw["lr_adapt"] = None
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        out = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            out[key] = _coerce(key, raw, cls)
        return cls(**out)


def _coerce(key, raw, cls):
    if not isinstance(raw, str):
        return raw
    default = getattr(cls(), key)
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float) or key == "lr_adapt":
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split())
    return raw


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


@dataclass
class StepReport:
    step: int
    L_x: float
    L_u: float
    L_aux: float
    L_apt: float
    mask_rate: float
    uu_acc: float
    tau_t: float
    ipp: float | None = None


HISTORY_FIELDS = ("step", "L_x", "L_u", "L_aux", "L_apt", "mask_rate", "uu_acc", "tau_t")


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.step] + [repr(float(getattr(r, k))) for k in HISTORY_FIELDS[1:]])


# ------------------------------------------------------------------ losses

def supervised_loss(x, y, params: ModelParams) -> Tensor:
    if len(y) == 0:
        raise ValueError("supervised_loss: empty batch")
    return mean(cross_entropy_rows(classify(encode(x, params), params), y))


def unsupervised_loss(u_strong, hard_labels, mask, params: ModelParams,
                      divisor: int | None = None) -> Tensor:
    """Masked cross-entropy on strong views; divides by the batch size, not the mask count."""
    if not (len(u_strong) == len(hard_labels) == len(mask)):
        raise ValueError(f"unsupervised_loss: batch of {len(u_strong)} but "
                         f"{len(hard_labels)} labels / {len(mask)} mask entries")
    divisor = len(u_strong) if divisor is None else divisor
    per = cross_entropy_rows(classify(encode(u_strong, params), params), hard_labels)
    return scale(tsum(mul(per, Tensor(np.asarray(mask, dtype=np.float64)))), 1.0 / divisor)


def aux_loss(x_labeled, u_weak, u_strong, params: ModelParams, task: AuxTask, rng,
             mu: int | None = None) -> Tensor:
    """(sum over labeled + sum over weak + sum over strong) / ((2 mu + 1) B)."""
    B = len(x_labeled)
    mu = len(u_weak) // max(B, 1) if mu is None else mu
    if len(u_weak) != mu * B or len(u_strong) != mu * B:
        raise ValueError(f"aux_loss: expected unlabeled streams of {mu * B}, got "
                         f"{len(u_weak)} and {len(u_strong)}")
    sc = params.shared_count
    total = None
    for stream in (x_labeled, u_weak, u_strong):
        part = tsum(task.per_sample(stream, params, rng, grad_layers=sc))
        total = part if total is None else total + part
    return scale(total, 1.0 / ((2 * mu + 1) * B))


def total_loss(l_x: Tensor, l_u: Tensor, l_aux: Tensor, lambda_u: float, lambda_a: float) -> Tensor:
    out = l_x
    if lambda_u:
        out = out + scale(l_u, lambda_u)
    if lambda_a:
        out = out + scale(l_aux, lambda_a)
    return out


def adaptive_threshold_update(tau_prev: float, confidences, m: float = 0.001) -> float:
    """EMA threshold ``(1 - m) tau_prev + m mean(conf)``; decay 0.999 means m = 0.001."""
    return (1.0 - m) * tau_prev + m * float(np.mean(confidences))


# ------------------------------------------------------------------ loop

class BatchCycler:
    """Endless shuffled index batches; a batch may straddle an epoch boundary."""

    def __init__(self, n: int, batch: int, rng):
        self.n, self.batch, self.rng = n, batch, rng
        self._order = np.empty(0, dtype=int)

    def next(self) -> np.ndarray:
        while len(self._order) < self.batch:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        out, self._order = self._order[: self.batch], self._order[self.batch:]
        return out


def stream(seed: int, name: str):
    return np.random.default_rng([seed, STREAMS[name]])


@dataclass
class TrainState:
    params: ModelParams
    history: list = field(default_factory=list)
    tau_t: float = 0.0
    fallbacks: int = 0


def train(config: TrainConfig, bundle: DatasetBundle, params: ModelParams | None = None,
          callback=None):
    """Run ``config.steps`` joint training steps; returns (params, history)."""
    S2 = bundle.size * bundle.size
    params = params or init_model(config.arch(bundle.n_classes, S2), seed=config.seed)
    if params.shared_count != config.shared_count:
        raise ValueError("params.shared_count differs from config.shared_count")
    task = config.task
    B, uB = config.B, config.B * config.mu
    order = stream(config.seed, "order")
    lab_iter = BatchCycler(len(bundle.labeled), B, order)
    unl_iter = BatchCycler(len(bundle.unlabeled), uB, order)
    aug = stream(config.seed, "augment")
    rot_joint = stream(config.seed, "rot_joint")
    rot_adapt = stream(config.seed, "rot_adapt")
    hidden, _ = bundle.unlabeled.reveal("uu telemetry")
    state = TrainState(params, tau_t=1.0 / bundle.n_classes if config.learner == "adaptive_threshold"
                       else config.tau)
    all_params = params.tensors("all")

    for step in range(config.steps):
        li, ui = lab_iter.next(), unl_iter.next()
        x_raw = bundle.labeled.pixels[li]
        y = bundle.labeled.labels[li]
        x_sup = weak_aug_batch(x_raw, aug) if config.labeled_aug else x_raw
        u = bundle.unlabeled.pixels[ui]
        u_w = weak_aug_batch(u, aug)
        u_s = strong_aug_batch(u, aug)

        if config.ssfa_enabled:
            out = adaptation.fam_pipeline(params, u_w, config, rot_adapt, tau=None,
                                          hidden_labels=hidden[ui] if config.diag_ipp else None)
            q, hard, l_apt, ipp = out.q_prime, out.hard_labels, out.l_apt_value, out.ipp
            state.fallbacks += out.fallback
        else:
            q, hard = adaptation.baseline_pseudo(u_w, params)
            l_apt = float(adaptation.adapt_loss(u_w, _no_grad(params), task, rot_adapt).data)
            ipp = None
        conf = q.max(axis=1)
        if config.learner == "adaptive_threshold":
            state.tau_t = adaptive_threshold_update(state.tau_t, conf)
        mask = conf > state.tau_t

        l_x = supervised_loss(x_sup, y, params)
        l_u = unsupervised_loss(u_s, hard, mask, params)
        l_aux = aux_loss(x_raw, u_w, u_s, params if config.lambda_a else _no_grad(params),
                         task, rot_joint, config.mu)
        comps = {"L_x": float(l_x.data), "L_u": float(l_u.data), "L_aux": float(l_aux.data)}
        if not all(math.isfinite(v) for v in comps.values()):
            raise TrainingDiverged(step, comps)
        loss = total_loss(l_x, l_u, l_aux, config.lambda_u, config.lambda_a)
        backward(loss, all_params)
        sgd_step(all_params, config.lr_main)

        uu = float(np.mean(hard[mask] == hidden[ui][mask])) if mask.any() else float("nan")
        report = StepReport(step, comps["L_x"], comps["L_u"], comps["L_aux"], l_apt,
                            float(mask.mean()), uu, float(state.tau_t), ipp)
        state.history.append(report)
        if callback is not None:
            callback(report, params)
    return params, state.history


def _no_grad(params: ModelParams) -> ModelParams:
    from .adaptation import _frozen
    return ModelParams(params.arch, [_frozen(l) for l in params.encoder],
                       _frozen(params.main_head), _frozen(params.aux_head))

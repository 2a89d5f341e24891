"""Feature adaptation before pseudo-labelling.

A scratch copy of the shared encoder layers takes one SGD step on the
self-supervised loss of the weak unlabeled views.  The adapted encoder
predicts the pseudo-labels and is then thrown away; the persistent
parameters are only ever read.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .autodiff import Tensor, backward, mean
from .aux_tasks import AuxTask, cross_entropy_rows
from .model import Layer, ModelParams, classify, encode, forward_numpy, softmax_np

log = logging.getLogger(__name__)


@dataclass
class AdaptationOutcome:
    q_prime: np.ndarray
    hard_labels: np.ndarray
    mask: np.ndarray
    l_apt_value: float
    ipp: float | None = None
    fallback: bool = False


def pseudo_from_probs(q: np.ndarray, tau: float):
    """Hard labels (argmax, lowest index on ties) and the confidence mask max(q) > tau."""
    hard = np.argmax(q, axis=1)
    return hard, q.max(axis=1) > tau


def baseline_pseudo(u_weak: np.ndarray, params: ModelParams):
    """Pseudo-label distribution from the current model on the weak views."""
    q = softmax_np(forward_numpy(u_weak, params.encoder, params.main_head))
    return q, np.argmax(q, axis=1)


def _frozen(layer: Layer | None) -> Layer | None:
    return None if layer is None else Layer(layer.W.detach(), layer.b.detach())


def _scratch_view(params: ModelParams):
    sc = params.shared_count
    scratch = [Layer(Tensor(l.W.data.copy(), requires_grad=True, name=f"enc{i}.W'"),
                     Tensor(l.b.data.copy(), requires_grad=True, name=f"enc{i}.b'"))
               for i, l in enumerate(params.encoder[:sc])]
    view = ModelParams(params.arch, scratch + [_frozen(l) for l in params.encoder[sc:]],
                       _frozen(params.main_head), _frozen(params.aux_head))
    return scratch, view


def adapt_loss(u_weak: np.ndarray, params: ModelParams, task: AuxTask, rng,
               grad_layers: int | None = None) -> Tensor:
    """Mean self-supervised loss over the weak unlabeled views only."""
    if len(u_weak) == 0:
        raise ValueError("adapt_loss: empty batch")
    return task.loss(u_weak, params, rng, grad_layers)


def one_step_adapt(params: ModelParams, u_weak: np.ndarray, task: AuxTask, lr_adapt: float, rng):
    """Return (adapted shared layers, L_apt value, tensors of the scratch view).

    Raises FloatingPointError if the adaptation loss or its gradient is not finite.
    """
    if lr_adapt < 0:
        raise ValueError("lr_adapt must be nonnegative")
    scratch, view = _scratch_view(params)
    loss = adapt_loss(u_weak, view, task, rng)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite adaptation loss {value}")
    flat = [t for layer in scratch for t in layer.tensors]
    backward(loss, flat)
    if not all(np.all(np.isfinite(t.grad)) for t in flat):
        raise FloatingPointError("non-finite adaptation gradient")
    autodiff.sgd_step(flat, lr_adapt)
    return scratch, value, view


def gradient_inner_product(params: ModelParams, x: np.ndarray, labels: np.ndarray,
                           task: AuxTask, rng) -> float:
    """<grad of main cross-entropy, grad of self-supervised loss> over the shared layers."""
    scratch, view = _scratch_view(params)
    flat = [t for layer in scratch for t in layer.tensors]
    main = mean(cross_entropy_rows(classify(encode(x, view), view), labels))
    backward(main, flat)
    g_main = [t.grad.copy() for t in flat]
    backward(adapt_loss(x, view, task, rng), flat)
    return float(sum(np.vdot(a, t.grad) for a, t in zip(g_main, flat)))


def fam_pipeline(params: ModelParams, u_weak: np.ndarray, config, rng, tau: float | None = None,
                 hidden_labels: np.ndarray | None = None) -> AdaptationOutcome:
    """Adapt a scratch encoder on ``u_weak``, predict with it, discard it.

    ``config`` supplies ``lr_adapt``, ``tau``, ``aux_task`` and ``diag_ipp``;
    ``tau`` overrides the threshold (adaptive learners).
    """
    task = config.task if hasattr(config, "task") else AuxTask(config.aux_task)
    tau = config.tau if tau is None else tau
    ipp = None
    if getattr(config, "diag_ipp", False) and hidden_labels is not None:
        ipp = gradient_inner_product(params, u_weak, hidden_labels, task,
                                     np.random.default_rng(rng.integers(2**63)))
    try:
        scratch, l_apt, _ = one_step_adapt(params, u_weak, task, config.lr_adapt, rng)
    except FloatingPointError as exc:
        log.warning("adaptation fell back to baseline pseudo-labels: %s", exc)
        q, hard = baseline_pseudo(u_weak, params)
        return AdaptationOutcome(q, hard, q.max(axis=1) > tau, float("nan"), ipp, fallback=True)
    encoder = scratch + params.encoder[len(scratch):]
    q = softmax_np(forward_numpy(u_weak, encoder, params.main_head))
    hard, mask = pseudo_from_probs(q, tau)
    return AdaptationOutcome(q, hard, mask, l_apt, ipp)

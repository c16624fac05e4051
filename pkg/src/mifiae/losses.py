"""Joint objective: voxel MSE, KL feature alignment and Cox partial likelihood."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class BatchSurvival:
    risks: Tensor
    times: np.ndarray
    events: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.events = np.asarray(self.events)
        n = self.risks.shape[0] if self.risks.ndim else 1
        if self.risks.ndim != 1 or self.times.shape != (n,) or self.events.shape != (n,):
            raise ShapeError(
                f"BatchSurvival: risks {self.risks.shape}, times {self.times.shape}, "
                f"events {self.events.shape} must be equal-length vectors")
        if not (self.times > 0).all():
            raise ValueError("BatchSurvival: times must be positive")
        if not np.isin(self.events, (0, 1)).all():
            raise ValueError("BatchSurvival: events must be 0/1")
        self.events = self.events.astype(np.int64)


def reconstruction_loss(gtv: Tensor, recon: Tensor) -> Tensor:
    """Mean squared voxel error (non-negative)."""
    if gtv.shape != recon.shape:
        raise ShapeError(f"reconstruction_loss: {gtv.shape} vs {recon.shape}")
    d = T.sub(gtv, recon)
    return T.mean(T.mul(d, d))


def alignment_loss(f_img: Tensor, f_tab: Tensor) -> Tensor:
    """KL(softmax(f_img) || softmax(f_tab)) over the last axis.

    Batched inputs give the mean divergence over the leading axis.
    """
    if f_img.shape != f_tab.shape:
        raise ShapeError(f"alignment_loss: {f_img.shape} vs {f_tab.shape}")
    log_p = T.log_softmax(f_img, axis=-1)
    log_q = T.log_softmax(f_tab, axis=-1)
    p = T.softmax(f_img, axis=-1)
    kl = T.sum(T.mul(p, T.sub(log_p, log_q)), axis=-1)
    return T.mean(kl) if kl.ndim else kl


def cox_loss(batch: BatchSurvival) -> Tensor:
    """Negative Cox partial log-likelihood averaged over observed events.

    Risk set at T_i is every j with T_j >= T_i (Breslow handling of ties).
    """
    n_events = int(batch.events.sum())
    if n_events == 0:
        raise ValueError("cox_loss: batch has no observed events")
    h = batch.risks
    at_risk = (batch.times[None, :] >= batch.times[:, None]).astype(np.float64)
    rows = np.flatnonzero(batch.events)
    n = h.shape[0]
    mask = at_risk[rows]
    # per-event shift by the risk-set maximum; out-of-set entries are zeroed before exp
    shift = np.where(mask > 0, h.data[None, :], -np.inf).max(axis=1)
    hh = T.expand(T.reshape(h, (1, n)), (rows.size, n))
    d = T.mul(T.sub(hh, Tensor(np.repeat(shift[:, None], n, axis=1))), Tensor(mask))
    denom = T.sum(T.mul(T.exp(d), Tensor(mask)), axis=1)
    lse = T.add(T.log(denom), Tensor(shift))
    picked = T.matmul(Tensor(np.eye(h.shape[0])[rows]), T.reshape(h, (-1, 1)))
    terms = T.sub(T.reshape(picked, (-1,)), lse)
    return T.scale(T.sum(terms), -1.0 / n_events)


def total_loss(rec, align, surv, weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the three terms; ``align`` may be ``None`` when ablated."""
    parts = [(rec, weights[0]), (align, weights[1]), (surv, weights[2])]
    out = None
    for term, w in parts:
        if term is None:
            continue
        term = term if isinstance(term, Tensor) else Tensor(term)
        if not math.isfinite(term.item()):
            raise FloatingPointError("total_loss: non-finite component")
        term = term if w == 1.0 else T.scale(term, w)
        out = term if out is None else T.add(out, term)
    if out is None:
        raise ValueError("total_loss: no components")
    return out

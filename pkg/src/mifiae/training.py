"""Fold-level training and risk prediction shared by the CLI and tests."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Cohort
from .losses import BatchSurvival, alignment_loss, cox_loss, reconstruction_loss, total_loss
from .model import ModelConfig, forward_batch, init_params
from .tensor import AdamState, Tensor, adam_step

log = logging.getLogger(__name__)

VARIANTS = {
    "full": dict(use_mffsm=True, use_cmifm=True, use_align=True),
    "no_cmifm": dict(use_mffsm=True, use_cmifm=False, use_align=True),
    "no_mffsm": dict(use_mffsm=False, use_cmifm=True, use_align=True),
    "no_both": dict(use_mffsm=False, use_cmifm=False, use_align=True),
    "no_align": dict(use_mffsm=True, use_cmifm=True, use_align=False),
}

LOSS_COLUMNS = ("L_Rec", "L_Align", "L_Surv", "L_final")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class FoldState:
    """Everything needed to continue a fold's training run bit-for-bit."""
    params: dict[str, Tensor]
    optim: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    history: list[tuple[float, float, float, float]] = field(default_factory=list)


def variant_flags(name: str) -> dict[str, bool]:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(VARIANTS)}") from None


def batch_loss(cohort: Cohort, idx, params, cfg: ModelConfig, variant: str = "full",
               weights=(1.0, 1.0, 1.0)):
    """Joint loss on the patients ``idx``; returns (total, (rec, align, surv))."""
    flags = variant_flags(variant)
    ct, mask, tab, times, events = cohort.arrays(idx)
    out = forward_batch(Tensor(ct), Tensor(mask), Tensor(tab), params, cfg,
                        use_mffsm=flags["use_mffsm"], use_cmifm=flags["use_cmifm"])
    rec = reconstruction_loss(out.gtv, out.reconstruction)
    align = alignment_loss(out.f_img, out.f_tab) if flags["use_align"] else None
    surv = cox_loss(BatchSurvival(out.risk, times, events)) if events.any() else None
    return total_loss(rec, align, surv, weights), (rec, align, surv)


def epoch_order(train_idx: np.ndarray, seed: int, fold: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, fold, epoch])
    return np.asarray(train_idx)[rng.permutation(len(train_idx))]


def new_fold_state(cfg: ModelConfig, fold: int) -> FoldState:
    return FoldState(init_params(cfg, seed=cfg.seed + fold))


def train_fold(cohort: Cohort, train_idx, cfg: ModelConfig, tcfg: TrainConfig,
               variant: str = "full", fold: int = 0, state: FoldState | None = None,
               on_epoch=None) -> FoldState:
    """Run Adam on the joint loss until ``tcfg.epochs`` epochs are done.

    Each history row holds per-epoch means of (rec, align, surv, total);
    an ablated alignment term is logged as 0.  ``on_epoch(state)`` is called
    after every epoch (checkpointing hook).
    """
    flags = variant_flags(variant)
    state = state or new_fold_state(cfg, fold)
    params = state.params
    while state.epoch < tcfg.epochs:
        order = epoch_order(train_idx, tcfg.seed, fold, state.epoch)
        sums = np.zeros(4)
        n_batches = 0
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            for p in params.values():
                p.grad = None
            loss, (rec, align, surv) = batch_loss(cohort, idx, params, cfg, variant, tcfg.loss_weights)
            T.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items() if p.grad is not None},
                      state.optim, tcfg.lr, tcfg.betas, tcfg.eps)
            sums += [rec.item(), align.item() if flags["use_align"] else 0.0,
                     surv.item() if surv is not None else 0.0, loss.item()]
            n_batches += 1
        state.history.append(tuple(float(v) for v in sums / n_batches))
        state.epoch += 1
        log.debug("fold %d epoch %d: %s", fold, state.epoch, state.history[-1])
        if on_epoch is not None:
            on_epoch(state)
    return state


def predict_risks(cohort: Cohort, idx, params, cfg: ModelConfig, variant: str = "full",
                  chunk: int = 64) -> np.ndarray:
    flags = variant_flags(variant)
    idx = np.asarray(idx)
    out = []
    with T.no_grad():
        for start in range(0, len(idx), chunk):
            ct, mask, tab, _, _ = cohort.arrays(idx[start:start + chunk])
            fo = forward_batch(Tensor(ct), Tensor(mask), Tensor(tab), params, cfg,
                               use_mffsm=flags["use_mffsm"], use_cmifm=flags["use_cmifm"])
            out.append(fo.risk.data.copy())
    return np.concatenate(out) if out else np.zeros(0)


def folds_digest(folds) -> str:
    """Stable hash of fold assignments, logged to prove shared splits."""
    h = hashlib.sha256()
    for train, test in folds:
        h.update(np.asarray(train, dtype="<i8").tobytes())
        h.update(b"|")
        h.update(np.asarray(test, dtype="<i8").tobytes())
        h.update(b"#")
    return h.hexdigest()[:16]

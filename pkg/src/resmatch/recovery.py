"""Per-step recovery objective and the Adam update on pixels.

The objective for one teacher is batch-mean cross-entropy to the hard target
labels plus ``lam`` times the BN-statistics divergence

    d_global = sum_l ||mu_l(x) - running_mean_l||_2 + ||var_l(x) - running_var_l||_2

With several teachers the per-teacher totals (and gradients) are averaged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import FULL32, Tensor, overflow_monitor
from .errors import ContractError, NumericError
from .models import TrainedModel, forward_logits
from .policy import FULL, MIXED, PrecisionPolicy

__all__ = [
    "AdamState", "FULL", "MIXED", "PrecisionPolicy", "RecoveryLossReport", "bn_divergence", "grad_step",
    "recovery_loss", "write_trace",
]


@dataclass
class RecoveryLossReport:
    total: float
    ce: float
    d_global: float
    lam: float
    layer_residuals: list[dict] = field(default_factory=list)
    overflow_count: int = 0

    def row(self, step: int) -> dict:
        return {"step": step, "ce": self.ce, "d_global": self.d_global, "total": self.total,
                "precision_overflow_count": self.overflow_count}


def bn_divergence(batch_stats, running_stats) -> tuple[Tensor, list[dict]]:
    """Sum over layers of ``||mu - running_mean||_2 + ||var - running_var||_2``.

    ``batch_stats`` holds (layer, mean, var) tensors; ``running_stats(layer)``
    returns the stored (mean, var) arrays.
    """
    if not batch_stats:
        raise ContractError("no batch statistics to match (was the forward run in eval mode?)")
    terms, residuals = [], []
    for name, mu, var in batch_stats:
        rm, rv = running_stats(name)
        mean_norm = ad.l2norm(mu - Tensor(rm))
        var_norm = ad.l2norm(var - Tensor(rv))
        terms += [mean_norm, var_norm]
        residuals.append({"layer": name, "mean_norm": mean_norm.item(), "var_norm": var_norm.item()})
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, residuals


def _single_teacher(teacher: TrainedModel, x: np.ndarray, labels: np.ndarray, lam: float,
                    policy: PrecisionPolicy, bn_mode: str):
    xt = Tensor(x, FULL32, requires_grad=True)
    res = forward_logits(teacher, xt, bn_mode, policy)
    ce = ad.cross_entropy(res.logits, labels)
    d_global, residuals = bn_divergence(res.batch_stats, teacher.running_stats)
    ce_val, d_val = ce.item(), d_global.item()
    if not math.isfinite(ce_val):
        raise NumericError(f"non-finite cross-entropy ({ce_val})", term="ce",
                           precision=policy.logits_and_ce)
    if not math.isfinite(d_val):
        raise NumericError(f"non-finite BN divergence ({d_val})", term="d_global",
                           precision=policy.bn_divergence)
    total = ad.cast(ce, FULL32) + d_global * np.float32(lam)
    ad.backward(total)
    return total.item(), ce_val, d_val, residuals, xt.grad


def recovery_loss(teachers: Sequence[TrainedModel], x, labels, lam: float = 1.0,
                  policy: PrecisionPolicy = FULL,
                  bn_mode: str = "train") -> tuple[RecoveryLossReport, np.ndarray]:
    """Evaluate the objective and its full32 gradient with respect to the pixels."""
    if isinstance(teachers, TrainedModel):
        teachers = [teachers]
    if len(teachers) < 1:
        raise ContractError("recovery_loss needs at least one teacher")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or x.shape[0] < 2:
        raise ContractError(f"recovery needs a batch of >= 2 images, got dims {list(x.shape)}")
    if labels.shape != (x.shape[0],):
        raise ContractError(f"{labels.size} labels for a batch of {x.shape[0]}")
    overflow_monitor.reset()
    results = []
    for teacher in teachers:
        nc = teacher.spec.num_classes
        if labels.min() < 0 or labels.max() >= nc:
            raise ContractError(f"label out of range [0, {nc})")
        results.append(_single_teacher(teacher, x, labels, lam, policy, bn_mode))
    n = len(results)
    grad = results[0][4].copy()
    for r in results[1:]:
        grad += r[4]
    if n > 1:
        grad /= np.float32(n)
    report = RecoveryLossReport(
        total=sum(r[0] for r in results) / n,
        ce=sum(r[1] for r in results) / n,
        d_global=sum(r[2] for r in results) / n,
        lam=lam,
        layer_residuals=results[0][3] if n == 1 else [r[3] for r in results],
        overflow_count=overflow_monitor.reset(),
    )
    return report, grad


# -- optimizer -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 0.25
    beta1: float = 0.5
    beta2: float = 0.9
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, x: np.ndarray, lr: float = 0.25, betas=(0.5, 0.9), eps: float = 1e-8):
        return cls(np.zeros(x.shape, np.float32), np.zeros(x.shape, np.float32), 0, lr,
                   betas[0], betas[1], eps)

    def reset(self, shape) -> "AdamState":
        """Fresh moments for a new pixel shape; hyperparameters kept."""
        return replace(self, m=np.zeros(shape, np.float32), v=np.zeros(shape, np.float32),
                       step_count=0)


def grad_step(x: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float | None = None) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step; ``lr`` overrides the state's rate (for schedules)."""
    if x.shape != grad.shape or state.m.shape != x.shape:
        raise ContractError(f"shape mismatch: x {x.shape}, grad {grad.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite pixel gradient", term="grad", precision=FULL32)
    lr = state.lr if lr is None else lr
    t = state.step_count + 1
    m = (state.beta1 * state.m + (1 - state.beta1) * grad).astype(np.float32)
    v = (state.beta2 * state.v + (1 - state.beta2) * grad * grad).astype(np.float32)
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    x_new = (x - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)
    return x_new, replace(state, m=m, v=v, step_count=t)


TRACE_FIELDS = ("step", "ce", "d_global", "total", "precision_overflow_count")


def write_trace(rows: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("ce", "d_global", "total") else r[k])
                        for k in TRACE_FIELDS})
    return path

"""Zero-inflated projection heads, cumulative head, and the joint objective."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import MLP, Module

P_CLAMP = 1e-7


class TargetHeads(Module):
    """Classification, magnitude and cumulative heads for one target variable."""

    def __init__(self, rng: np.random.Generator, D: int, softplus_value: bool = False):
        self.cls_head = MLP(rng, D, D, 1)
        self.val_head = MLP(rng, D, D, 1)
        self.cum_head = MLP(rng, D, D, 1)
        self.softplus_value = softplus_value

    def __call__(self, h: Tensor, use_zip: bool = True) -> tuple[Tensor | None, Tensor, Tensor, Tensor]:
        """Returns (p, y_tilde, y_hat, y_cum_hat), each shaped like ``h`` minus its last axis.

        With ``use_zip`` off the classifier is skipped, p is None and y_hat = y_tilde.
        """
        lead = h.shape[:-1]
        y_tilde = ag.reshape(self.val_head(h), lead)
        if self.softplus_value:
            y_tilde = ag.softplus(y_tilde)
        y_cum = ag.reshape(self.cum_head(h), lead)
        if not use_zip:
            return None, y_tilde, y_tilde, y_cum
        p = ag.sigmoid(ag.reshape(self.cls_head(h), lead))
        return p, y_tilde, p * y_tilde, y_cum


def predict(heads: TargetHeads, h: Tensor, use_zip: bool = True):
    return heads(h, use_zip)


def _masked_mean(values: Tensor, mask: np.ndarray, count: float) -> Tensor:
    return (values * mask).sum() * (1.0 / count)


def bce_terms(p: Tensor, nonzero: np.ndarray) -> Tensor:
    """-I{y!=0} ln p - I{y=0} ln(1-p), with p clamped away from 0 and 1."""
    pc = ag.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return -(ag.log(pc) * nonzero + ag.log(1.0 - pc) * (1.0 - nonzero))


def zip_loss_parts(p: Tensor | None, y_hat: Tensor, y_norm: np.ndarray, y_raw: np.ndarray,
                   valid_mask: np.ndarray) -> tuple[Tensor | None, Tensor]:
    """(BCE, MSE) parts for one target, each averaged over valid slots."""
    mask = np.asarray(valid_mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("zip_loss: no valid slots")
    mse = _masked_mean(ag.square(y_hat - y_norm), mask, count)
    if p is None:
        return None, mse
    nonzero = (np.asarray(y_raw) != 0).astype(np.float64)
    return _masked_mean(bce_terms(p, nonzero), mask, count), mse


def zip_loss(p, y_hat, y_norm, y_raw, valid_mask) -> Tensor:
    """Sum over targets of the per-target joint loss.

    Arguments are sequences indexed by target (or single arrays for one target).
    """
    if isinstance(y_hat, Tensor):
        p, y_hat, y_norm, y_raw = [p], [y_hat], [y_norm], [y_raw]
    total = None
    for pi, yh, yn, yr in zip(p, y_hat, y_norm, y_raw):
        bce, mse = zip_loss_parts(pi, yh, yn, yr, valid_mask)
        term = mse if bce is None else bce + mse
        total = term if total is None else total + term
    return total


def cum_loss(y_cum_hat, y_cum, valid_mask) -> Tensor:
    """Masked MSE over valid slots, summed over targets."""
    if isinstance(y_cum_hat, Tensor):
        y_cum_hat, y_cum = [y_cum_hat], [y_cum]
    mask = np.asarray(valid_mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("cum_loss: no valid slots")
    total = None
    for yh, y in zip(y_cum_hat, y_cum):
        term = _masked_mean(ag.square(yh - y), mask, count)
        total = term if total is None else total + term
    return total


def total_loss(zip_value: Tensor, cum_value: Tensor, gamma: float = 1.0) -> Tensor:
    return zip_value + cum_value * gamma


@dataclass
class LossReport:
    total: float
    zip_loss: float
    bce_part: float
    mse_part: float
    cum_loss: float
    valid_slot_count: int
    per_target: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def first_nonfinite(self) -> str | None:
        for name in ("bce_part", "mse_part", "cum_loss", "zip_loss", "total"):
            if not np.isfinite(getattr(self, name)):
                return name
        return None

"""Empirical check that the zero-inflated heads recover the oracle's win probability and mean.

The heads sit on a small feature map of (bid, tick) and are fitted to outcomes sampled from
one scenario. At the optimum of the joint loss the classifier matches Pr(y != 0) and the
product p * y_tilde matches E[y]; the magnitude alone need not match E[y | y != 0].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .heads import TargetHeads, zip_loss_parts
from .layers import Linear, Module
from .synth import ScenarioSpec, sample_outcomes, true_expected_cost, true_win_prob
from .training import Adam


class FeatureHeads(Module):
    """(bid, tick) -> ReLU features -> one set of target heads."""

    def __init__(self, rng: np.random.Generator, D: int = 32, n_features: int = 4):
        self.features = Linear(rng, n_features, D)
        self.heads = TargetHeads(rng, D)

    def __call__(self, x):
        return self.heads(ag.relu(self.features(x)))


def featurize(bid, tick, T_max: int) -> np.ndarray:
    bid, tick = np.broadcast_arrays(np.asarray(bid, float), np.asarray(tick, float))
    angle = 2 * np.pi * tick / T_max
    return np.stack([np.log1p(bid) - 2.5, tick / T_max - 0.5, np.sin(angle), np.cos(angle)], -1)


@dataclass
class ConsistencyReport:
    p_abs_error: float          # mean |p_learned - p_true| over the grid
    product_rel_error: float    # mean |p*y_tilde - p_true*g_true| / (p_true*g_true)
    n_samples: int
    grid: tuple


def check_consistency(spec: ScenarioSpec, n_samples: int = 200_000, grid: int = 20, D: int = 32,
                      steps: int = 4000, batch_size: int = 2048, lr: float = 3e-3, seed: int = 0
                      ) -> ConsistencyReport:
    """Fit heads to sampled costs (scaled linearly so the mean stays exact) and score them on a grid."""
    rng = np.random.default_rng(seed)
    lo, hi = spec.bid_range
    bids = np.exp(rng.uniform(np.log(lo), np.log(hi), n_samples))
    ticks = rng.integers(0, spec.T_max, n_samples)
    cost, _, _ = sample_outcomes(spec, bids, ticks, rng)
    scale = float(np.sqrt(np.mean(cost ** 2)))
    x, y = featurize(bids, ticks, spec.T_max), cost / scale

    model = FeatureHeads(np.random.default_rng([seed, 1]), D)
    params = model.named_parameters()
    opt = Adam(params, lr)
    ones = np.ones(batch_size)
    for step in range(steps):
        opt.lr = lr * 0.5 * (1 + np.cos(np.pi * step / steps))   # cosine decay to zero
        idx = rng.integers(0, n_samples, batch_size)
        p, _, y_hat, _ = model(x[idx])
        bce, mse = zip_loss_parts(p, y_hat, y[idx], y[idx], ones)
        loss = bce + mse
        for t in params.values():
            t.grad = None
        loss.backward()
        opt.step({k: t.grad for k, t in params.items()})

    gb, gt = np.meshgrid(np.exp(np.linspace(np.log(lo), np.log(hi), grid)),
                         np.linspace(0, spec.T_max - 1, grid), indexing="ij")
    with ag.no_grad():
        p, y_tilde, _, _ = model(featurize(gb.ravel(), gt.ravel(), spec.T_max))
    p_true = true_win_prob(spec, gb.ravel(), gt.ravel())
    mean_true = p_true * true_expected_cost(spec, gb.ravel(), gt.ravel()) / scale
    return ConsistencyReport(float(np.mean(np.abs(p.data - p_true))),
                             float(np.mean(np.abs(p.data * y_tilde.data - mean_true) / mean_true)),
                             n_samples, (grid, grid))

"""Measurement procedures: error metrics, behavioural probes, export and bid selection."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .data import (TARGET_NAMES, BidRecord, NormStats, Pair, PreparedBatch, RawBatch, Trajectory, build_raw,
                   denormalize_targets, normalize)
from .model import Bid2X

DEFAULT_ALPHAS = (0.5, 1.0, 1.5, 2.0)
# tick-cost bucket edges before dividing by the currency divisor
COST_EDGES = (0.0, 100.0, 1000.0, 10000.0, math.inf)


@dataclass
class Predictions:
    """Normalised model outputs stacked over targets, [B, T, 3] each; ``p`` is None without the ZIP head."""
    p: np.ndarray | None
    y_tilde: np.ndarray
    y_hat: np.ndarray
    y_cum: np.ndarray


def predict(model: Bid2X, batch: PreparedBatch, chunk: int = 64) -> Predictions:
    parts = []
    for start in range(0, len(batch), chunk):
        out = model.predict(batch.subset(slice(start, start + chunk)))
        parts.append((None if out.p[0] is None else out.stacked("p"), out.stacked("y_tilde"),
                      out.stacked("y_hat"), out.stacked("y_cum")))
    cat = lambda i: None if parts[0][i] is None else np.concatenate([q[i] for q in parts])  # noqa: E731
    return Predictions(cat(0), cat(1), cat(2), cat(3))


def to_raw(pred: Predictions, stats: NormStats) -> np.ndarray:
    """Raw-scale means: the magnitude is denormalised first, then weighted by Pr(non-zero)."""
    if pred.p is None:
        return denormalize_targets(stats, pred.y_hat)
    return pred.p * denormalize_targets(stats, pred.y_tilde)


def predict_raw(model: Bid2X, batch: PreparedBatch) -> np.ndarray:
    """Raw-scale next-slot predictions [B, T, 3]."""
    return to_raw(predict(model, batch), batch.norm_stats)


@dataclass
class EvalReport:
    per_target: dict
    n_slots: int
    n_samples: int
    split: str = ""
    scenario: str = ""

    def to_json(self) -> dict:
        return asdict(self)

    def mae(self, target: str = "cost") -> float:
        return self.per_target[target]["MAE"]

    def table(self) -> str:
        lines = [f"{'target':<8} {'MAE':>12} {'RMSE':>12}"]
        for name, m in self.per_target.items():
            lines.append(f"{name:<8} {m['MAE']:>12.4f} {m['RMSE']:>12.4f}")
        return "\n".join(lines)


def score(pred_raw: np.ndarray, batch: PreparedBatch | RawBatch, split: str = "", scenario: str = "") -> EvalReport:
    """MAE / RMSE of raw predictions over valid slots."""
    mask = batch.valid_mask > 0
    n = int(mask.sum())
    if n == 0:
        raise ValueError("evaluate: empty split")
    truth = batch.targets_raw if isinstance(batch, PreparedBatch) else batch.targets
    per = {}
    for j, name in enumerate(TARGET_NAMES):
        err = (pred_raw[..., j] - truth[..., j])[mask]
        per[name] = {"MAE": float(np.mean(np.abs(err))), "RMSE": float(np.sqrt(np.mean(err * err)))}
    return EvalReport(per, n, len(batch), split, scenario)


def evaluate(model: Bid2X, batch: PreparedBatch, split: str = "", scenario: str = "") -> EvalReport:
    return score(predict_raw(model, batch), batch, split, scenario)


def constant_mean_predictions(train: PreparedBatch | RawBatch, like: PreparedBatch | RawBatch) -> np.ndarray:
    """Per-variable training mean broadcast to every slot of ``like``."""
    truth = train.targets_raw if isinstance(train, PreparedBatch) else train.targets
    means = truth[train.valid_mask > 0].mean(axis=0)
    return np.broadcast_to(means, like.valid_mask.shape + (len(TARGET_NAMES),)).copy()


def oracle_predictions(pairs: Sequence[Pair], specs: dict, T: int) -> np.ndarray:
    """Ground-truth conditional means per slot, from the generating scenario and campaign latents."""
    from .synth import oracle_for

    out = np.zeros((len(pairs), T, len(TARGET_NAMES)))
    for i, p in enumerate(pairs):
        bids = np.array([r.bid for r in p.today.records])
        ticks = np.array([r.tick for r in p.today.records])
        out[i, :len(bids)] = np.stack(oracle_for(p.campaign, specs).mean_outcome(bids, ticks), -1)
    return out


# -- monotonicity -------------------------------------------------------------

@dataclass
class MonotonicityReport:
    alphas: list
    edges: list
    hits: list
    misses: list
    ratio: float

    @property
    def bucket_ratios(self) -> list:
        return [h / (h + m) if h + m else float("nan") for h, m in zip(self.hits, self.misses)]

    def to_json(self) -> dict:
        return {**asdict(self), "bucket_ratios": self.bucket_ratios}

    def table(self) -> str:
        lines = [f"{'bucket':<24} {'hits':>6} {'misses':>7} {'ratio':>7}"]
        for lo, hi, h, m, r in zip(self.edges[:-1], self.edges[1:], self.hits, self.misses, self.bucket_ratios):
            lines.append(f"({lo:g}, {hi:g}]".ljust(24) + f" {h:>6} {m:>7} {r:>7.3f}")
        lines.append(f"{'overall':<24} {sum(self.hits):>6} {sum(self.misses):>7} {self.ratio:>7.3f}")
        return "\n".join(lines)


def monotonic_report(curves: np.ndarray, true_cost: np.ndarray, alphas: Sequence[float], divisor: float = 1.0,
                     tol: float = 1e-6, strict: bool = False) -> MonotonicityReport:
    """``curves`` is [N, len(alphas)] of predicted cost per sample; a hit is a non-decreasing row.

    Zero true cost falls into the lowest bucket.
    """
    steps = np.diff(np.asarray(curves, dtype=np.float64), axis=1)
    hit = np.all(steps > tol, axis=1) if strict else np.all(steps >= -tol, axis=1)
    edges = [e / divisor for e in COST_EDGES]
    bucket = np.clip(np.searchsorted(edges, np.asarray(true_cost), side="left") - 1, 0, len(edges) - 2)
    hits = [int(np.sum(hit & (bucket == k))) for k in range(len(edges) - 1)]
    misses = [int(np.sum(~hit & (bucket == k))) for k in range(len(edges) - 1)]
    ratio = float(np.mean(hit)) if len(hit) else float("nan")
    return MonotonicityReport(list(alphas), edges, hits, misses, ratio)


def last_slots(batch: PreparedBatch | RawBatch) -> np.ndarray:
    return batch.valid_mask.sum(axis=1).astype(int) - 1


def probe_monotonicity(model: Bid2X, pairs: Sequence[Pair], stats: NormStats, alphas=DEFAULT_ALPHAS,
                       divisor: float = 1.0, tol: float = 1e-6, strict: bool = False) -> MonotonicityReport:
    """Scale each sample's final bid by every alpha and check the predicted cost never falls."""
    alphas = list(alphas)
    if alphas != sorted(alphas):
        raise ValueError("alphas must be sorted ascending")
    raw = build_raw(pairs, model.config.T)
    rows, slots = np.arange(len(pairs)), last_slots(raw)
    curves = np.zeros((len(pairs), len(alphas)))
    for a, alpha in enumerate(alphas):
        variant = replace(raw, today_tokens=raw.today_tokens.copy())
        variant.today_tokens[rows, slots, 0] *= alpha
        curves[:, a] = to_raw(predict(model, normalize(variant, stats)), stats)[rows, slots, 0]
    return monotonic_report(curves, raw.targets[rows, slots, 0], alphas, divisor, tol, strict)


# -- predictability -----------------------------------------------------------

def decile_prefixes(length: int) -> list[int]:
    """Prefix lengths at 10%..90% of ``length``, rounded half up."""
    return [int(math.floor(k * length / 10 + 0.5)) for k in range(1, 10)]


@dataclass
class PredictabilityCurve:
    fractions: list
    mae: dict           # target -> 9 values
    counts: list
    spearman: dict      # target -> rank correlation of (decile, MAE)

    def to_json(self) -> dict:
        return asdict(self)


def predictability_from_errors(errors: np.ndarray) -> PredictabilityCurve:
    """``errors`` is [N, 9, 3] absolute errors at the nine prefix deciles."""
    fractions = [k / 10 for k in range(1, 10)]
    mae = {name: errors[:, :, j].mean(axis=0).tolist() for j, name in enumerate(TARGET_NAMES)}
    rho = {name: float(spearmanr(fractions, mae[name]).statistic) for name in TARGET_NAMES}
    return PredictabilityCurve(fractions, mae, [len(errors)] * 9, rho)


def probe_predictability(model: Bid2X, pairs: Sequence[Pair], stats: NormStats, min_length: int = 10
                         ) -> PredictabilityCurve:
    """Next-slot error after seeing 10%..90% of each day; causal masking makes one pass per sample enough."""
    pairs = [p for p in pairs if len(p.today.records) >= min_length]
    if not pairs:
        raise ValueError(f"no trajectories with at least {min_length} records")
    batch = normalize(build_raw(pairs, model.config.T), stats)
    pred = predict_raw(model, batch)
    errors = np.zeros((len(pairs), 9, len(TARGET_NAMES)))
    for i, p in enumerate(pairs):
        slots = decile_prefixes(len(p.today.records))
        errors[i] = np.abs(pred[i, slots] - batch.targets_raw[i, slots])
    return predictability_from_errors(errors)


# -- zero-shot ----------------------------------------------------------------

def zero_shot_eval(model: Bid2X, seen_scenarios: Sequence[str], holdout: Sequence[Pair], stats: NormStats,
                   scenario: str) -> EvalReport:
    """Evaluate on a scenario the model never trained on; refuses if it was seen."""
    if scenario in set(seen_scenarios):
        raise ValueError(f"scenario {scenario!r} appears in the training manifest")
    pairs = [p for p in holdout if p.campaign.scenario == scenario]
    if not pairs:
        raise ValueError(f"no samples for scenario {scenario!r}")
    return evaluate(model, normalize(build_raw(pairs, model.config.T), stats), "holdout", scenario)


# -- distribution export ------------------------------------------------------

@dataclass
class DistributionExport:
    target: str
    edges: list            # positive-value bin edges; the zero bin is separate
    predicted: list        # counts: [zero bin, *positive bins]
    truth: list
    pred_zero_mass: float
    true_zero_mass: float
    expected_zero_mass: float | None   # mean of 1 - p over valid slots

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n_p, n_t = max(sum(self.predicted), 1), max(sum(self.truth), 1)
        lines = [f"# {self.target}: bin_upper predicted_mass true_mass (first row is the exact-zero bin)",
                 f"0 {self.predicted[0] / n_p:.6f} {self.truth[0] / n_t:.6f}"]
        for hi, cp, ct in zip(self.edges[1:], self.predicted[1:], self.truth[1:]):
            lines.append(f"{hi:.6g} {cp / n_p:.6f} {ct / n_t:.6f}")
        path.write_text("\n".join(lines) + "\n")
        return path


def _histogram(values: np.ndarray, edges: np.ndarray) -> list:
    zero = int(np.sum(values == 0))
    pos = values[values != 0]
    counts, _ = np.histogram(np.clip(pos, edges[0], edges[-1]), bins=edges)
    return [zero, *counts.tolist()]


def export_distribution(model: Bid2X, batch: PreparedBatch, target: str = "cost", bins: int = 30,
                        seed: int = 0) -> DistributionExport:
    """Histogram of sampled predictions vs ground truth.

    A predicted sample is exactly zero with probability 1 - p and the magnitude head's value otherwise;
    without the ZIP head every sample is the regression output.
    """
    j = TARGET_NAMES.index(target)
    pred = predict(model, batch)
    mask = batch.valid_mask > 0
    magnitude = denormalize_targets(batch.norm_stats, pred.y_tilde)[..., j][mask]
    truth = batch.targets_raw[..., j][mask]
    if pred.p is None:
        sampled, expected = magnitude, None
    else:
        p = pred.p[..., j][mask]
        u = np.random.default_rng(seed).random(p.shape)
        sampled = np.where(u < p, magnitude, 0.0)
        expected = float(np.mean(1.0 - p))
    top = max(float(np.max(np.abs(truth))), 1.0)
    edges = np.concatenate([[-np.inf], np.geomspace(top * 1e-4, top, bins)])
    edges[0] = min(float(np.min(sampled)), 0.0) - 1.0
    return DistributionExport(target, edges.tolist(), _histogram(sampled, edges), _histogram(truth, edges),
                              float(np.mean(sampled == 0)), float(np.mean(truth == 0)), expected)


# -- bid selection ------------------------------------------------------------

def argmin_bid(grid: Sequence[float], predictions: Sequence[float], remaining_budget: float) -> float:
    """Grid bid whose predicted spend is closest to the budget; ties go to the smaller bid."""
    if len(grid) == 0:
        raise ValueError("empty bid grid")
    grid = np.asarray(grid, dtype=np.float64)
    dist = np.abs(np.asarray(predictions, dtype=np.float64) - remaining_budget)
    best = np.flatnonzero(dist == dist.min())
    return float(grid[best].min())


def _with_next(pair: Pair, bid: float, tick: int) -> Pair:
    recs = list(pair.today.records) + [BidRecord(bid, 0.0, 0.0, 0.0, tick)]
    return Pair(pair.history, Trajectory(pair.today.campaign, pair.today.day, recs, False))


def spend_curve(model: Bid2X, stats: NormStats, pair: Pair, grid: Sequence[float], next_tick: int | None = None,
                mode: str = "cumhead") -> np.ndarray:
    """Predicted remaining spend for each candidate bid."""
    T = model.config.T
    tick = pair.today.records[-1].tick + 1 if next_tick is None else next_tick
    slot = len(pair.today.records)
    if mode == "cumhead":
        batch = normalize(build_raw([_with_next(pair, b, tick) for b in grid], T), stats)
        cum = denormalize_targets(stats, predict(model, batch).y_cum, cumulative=True)
        return cum[:, slot, 0]
    if mode == "rollout":
        return np.array([_rollout_spend(model, stats, pair, b, tick) for b in grid])
    raise ValueError(f"unknown mode {mode!r}")


def _rollout_spend(model: Bid2X, stats: NormStats, pair: Pair, bid: float, tick: int) -> float:
    """Hold ``bid`` for every remaining tick, feeding predicted outcomes back as observations."""
    T = model.config.T
    state, total = pair, 0.0
    while tick < T and len(state.today.records) < T:
        batch = normalize(build_raw([_with_next(state, bid, tick)], T), stats)
        y = predict_raw(model, batch)[0, len(state.today.records)]
        y = np.maximum(y, 0.0)
        total += float(y[0])
        recs = list(state.today.records) + [BidRecord(bid, float(y[0]), float(y[1]), float(y[2]), tick)]
        state = Pair(state.history, Trajectory(state.today.campaign, state.today.day, recs, False))
        tick += 1
    return total


def select_bid(model: Bid2X, stats: NormStats, pair: Pair, remaining_budget: float, grid: Sequence[float],
               next_tick: int | None = None, mode: str = "cumhead") -> float:
    grid = list(grid)
    if not grid:
        raise ValueError("empty bid grid")
    if grid != sorted(grid):
        raise ValueError("bid grid must be sorted")
    return argmin_bid(grid, spend_curve(model, stats, pair, grid, next_tick, mode), remaining_budget)


# -- scaling sweep ------------------------------------------------------------

@dataclass
class ScalingTable:
    rows: list = field(default_factory=list)   # {"D", "seed", "final_val_loss"}

    def mean_by_D(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r["D"], []).append(r["final_val_loss"])
        return {d: float(np.mean(v)) for d, v in sorted(out.items())}

    def table(self) -> str:
        lines = [f"{'D':>5} {'mean final val loss':>20}"]
        lines += [f"{d:>5} {v:>20.5f}" for d, v in self.mean_by_D().items()]
        return "\n".join(lines)


def scaling_sweep(cfg, D_list: Sequence[int], seeds: Sequence[int], train_pairs, val_pairs, header,
                  on_result: Callable[[dict], None] | None = None) -> ScalingTable:
    from .training import train

    table = ScalingTable()
    for D in D_list:
        for seed in seeds:
            res = train(replace(cfg, D=D, seed=seed), train_pairs, val_pairs, header)
            row = {"D": D, "seed": seed, "final_val_loss": res.final_val_loss}
            table.rows.append(row)
            if on_result:
                on_result(row)
    return table


def write_jsonl(path, records: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return path

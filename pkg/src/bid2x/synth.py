"""Synthetic bidding environment with known ground truth.

Outcomes are zero-inflated (a lost slot yields exact zeros), cost saturates
concavely in the bid, and both cost and win probability carry a daily
periodic component. Campaigns additionally carry latent multipliers that
persist across days (visible through history) and a day-level factor
(visible only through today's records).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BidRecord, Campaign, DatasetHeader, Pair, Trajectory, write_dataset

PRICE_UNIT = 10.0
POLICIES = ("random_walk", "budget_pacing")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "default"
    seed: int = 0
    kappa: float = 20.0
    base_scale: float = 3.0
    periodic_amp: float = 0.3
    periodic_phase: float = 0.0
    win_slope: float = 1.0
    win_bias: float = -2.0
    roi_mean: float = 2.0
    noise_cv: float = 0.3
    budget_range: tuple = (500.0, 3000.0)
    T_max: int = 96
    adv_cat_vocab: int = 6
    prod_cat_vocab: int = 10
    duration_range: tuple = (48, 96)
    policy: str = "budget_pacing"
    bid_range: tuple = (4.0, 60.0)
    campaign_cost_sd: float = 0.3
    campaign_win_sd: float = 0.4
    day_cost_sd: float = 0.2
    skip_prob: float = 0.1

    def __post_init__(self):
        if self.kappa <= 0 or self.base_scale <= 0 or self.win_slope <= 0 or self.roi_mean <= 0:
            raise ValueError("kappa, base_scale, win_slope and roi_mean must be positive")
        if not 0 <= self.periodic_amp < 1:
            raise ValueError("periodic_amp must lie in [0, 1)")
        if self.noise_cv < 0:
            raise ValueError("noise_cv must be non-negative")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> ScenarioSpec:
        d = dict(d)
        for k in ("budget_range", "duration_range", "bid_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def seasonal(spec: ScenarioSpec, tick):
    return spec.periodic_amp * np.sin(2 * np.pi * np.asarray(tick) / spec.T_max + spec.periodic_phase)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _check_bid(bid):
    if np.any(np.asarray(bid) < 0):
        raise ValueError("bid must be non-negative")


def true_win_prob(spec: ScenarioSpec, bid, tick, win_shift: float = 0.0):
    """Probability that the slot is won (outcomes non-zero)."""
    _check_bid(bid)
    z = spec.win_bias + win_shift + spec.win_slope * np.log1p(bid) + 0.5 * seasonal(spec, tick)
    return _sigmoid(z)


def true_expected_cost(spec: ScenarioSpec, bid, tick, cost_scale: float = 1.0):
    """Expected cost given a win; concave increasing in bid, saturating."""
    _check_bid(bid)
    level = cost_scale * spec.base_scale * (1.0 + seasonal(spec, tick)) * spec.kappa
    return level * -np.expm1(-np.asarray(bid, dtype=np.float64) / spec.kappa)


def true_expected(spec: ScenarioSpec, bid, tick, cost_scale: float = 1.0):
    """Conditional-on-win expectations of (cost, reward, count)."""
    g = true_expected_cost(spec, bid, tick, cost_scale)
    return g, g * spec.roi_mean, 1.0 + g / PRICE_UNIT


def true_mean_outcome(spec: ScenarioSpec, bid, tick, cost_scale: float = 1.0, win_shift: float = 0.0):
    """Unconditional means p * g for (cost, reward, count)."""
    p = true_win_prob(spec, bid, tick, win_shift)
    return tuple(p * v for v in true_expected(spec, bid, tick, cost_scale))


class OracleHandle:
    """Ground-truth functions of one scenario (optionally with campaign latents applied)."""

    def __init__(self, spec: ScenarioSpec, cost_scale: float = 1.0, win_shift: float = 0.0):
        self.spec = spec
        self.cost_scale = cost_scale
        self.win_shift = win_shift

    def true_win_prob(self, bid, tick):
        return true_win_prob(self.spec, bid, tick, self.win_shift)

    def true_expected(self, bid, tick):
        return true_expected(self.spec, bid, tick, self.cost_scale)

    def mean_outcome(self, bid, tick):
        return true_mean_outcome(self.spec, bid, tick, self.cost_scale, self.win_shift)


def _unit_lognormal(rng: np.random.Generator, cv: float, size=None):
    """Log-normal draws with mean 1 and coefficient of variation ``cv``."""
    if cv == 0:
        return np.ones(size) if size is not None else 1.0
    s2 = math.log1p(cv * cv)
    return rng.lognormal(-s2 / 2, math.sqrt(s2), size)


def sample_outcomes(spec: ScenarioSpec, bid, tick, rng: np.random.Generator, cost_scale: float = 1.0,
                    win_shift: float = 0.0, win_prob=None):
    """Vectorised draw of (cost, reward, count) arrays; losses are exact zeros."""
    bid = np.asarray(bid, dtype=np.float64)
    tick = np.broadcast_to(np.asarray(tick), bid.shape)
    p = true_win_prob(spec, bid, tick, win_shift) if win_prob is None else np.broadcast_to(win_prob, bid.shape)
    g = true_expected_cost(spec, bid, tick, cost_scale)
    win = (rng.random(bid.shape) < p) & (g > 0)
    cost = np.where(win, g * _unit_lognormal(rng, spec.noise_cv, bid.shape), 0.0)
    count = np.where(win, 1 + rng.poisson(cost / PRICE_UNIT), 0)
    reward = np.where(win, cost * spec.roi_mean * _unit_lognormal(rng, spec.noise_cv, bid.shape), 0.0)
    return cost, reward, count


def sample_record(spec: ScenarioSpec, bid: float, tick: int, rng: np.random.Generator,
                  cost_scale: float = 1.0, win_shift: float = 0.0, win_prob: float | None = None) -> BidRecord:
    _check_bid(bid)
    c, r, n = sample_outcomes(spec, np.array([bid]), np.array([tick]), rng, cost_scale, win_shift,
                              None if win_prob is None else np.array([win_prob]))
    return BidRecord(float(bid), float(c[0]), float(r[0]), int(n[0]), int(tick))


@dataclass
class CampaignLatent:
    cost_scale: float = 1.0
    win_shift: float = 0.0
    start_tick: int = 0
    end_tick: int = 96
    base_bid: float = 20.0
    day_factors: dict = field(default_factory=dict)


def generate_campaign_day(spec: ScenarioSpec, campaign: Campaign, day: int, policy: str,
                          rng: np.random.Generator, latent: CampaignLatent | None = None) -> Trajectory:
    """Run one campaign-day under ``policy`` and return its (sparse) trajectory."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    lat = latent or CampaignLatent(end_tick=spec.T_max, base_bid=spec.kappa)
    day_factor = lat.day_factors.get(day, 1.0)
    cost_scale = lat.cost_scale * day_factor
    lo, hi = spec.bid_range
    bid = float(np.clip(lat.base_bid, lo, hi))
    spent = 0.0
    records = []
    for tick in range(lat.start_tick, lat.end_tick):
        if records and rng.random() < spec.skip_prob:
            continue
        if records:
            if policy == "random_walk":
                bid = bid * _unit_lognormal(rng, 0.1)
            else:
                remaining_ticks = lat.end_tick - tick
                per_tick = float(np.mean(true_mean_outcome(spec, bid, tick, cost_scale, lat.win_shift)[0]))
                expected_remaining = max(per_tick * remaining_ticks, 1e-9)
                ratio = float(np.clip((campaign.budget - spent) / expected_remaining, 0.5, 2.0))
                bid = lat.base_bid * ratio * _unit_lognormal(rng, 0.1)
            bid = float(np.clip(bid, lo, hi))
        rec = sample_record(spec, bid, tick, rng, cost_scale, lat.win_shift)
        records.append(rec)
        spent += rec.cost
        if spent >= campaign.budget:
            break
    return Trajectory(campaign, day, records, complete=True)


def _stream(spec: ScenarioSpec, campaign_index: int, base_seed: int = 0) -> np.random.Generator:
    key = f"{spec.seed}:{spec.name}:{campaign_index}:{base_seed}".encode()
    digest = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
    return np.random.default_rng(digest)


def _category_effect(spec: ScenarioSpec, n: int) -> np.ndarray:
    # product categories shift the cost level; fixed per scenario
    rng = np.random.default_rng([spec.seed, 7919])
    return np.exp(rng.normal(0.0, 0.25, n))


def generate_pair(spec: ScenarioSpec, index: int, base_seed: int = 0, header: DatasetHeader | None = None) -> Pair:
    """Campaign with a complete history day (0) and today (1)."""
    rng = _stream(spec, index, base_seed)
    adv_vocab = header.adv_cat_vocab if header else spec.adv_cat_vocab
    prod_vocab = header.prod_cat_vocab if header else spec.prod_cat_vocab
    adv = int(rng.integers(min(spec.adv_cat_vocab, adv_vocab)))
    prod = int(rng.integers(min(spec.prod_cat_vocab, prod_vocab)))
    lo_b, hi_b = spec.budget_range
    budget = float(math.exp(rng.uniform(math.log(lo_b), math.log(hi_b))))
    duration = int(rng.integers(spec.duration_range[0], spec.duration_range[1] + 1))
    duration = max(1, min(duration, spec.T_max))
    start = int(rng.integers(0, spec.T_max - duration + 1))
    cost_scale = float(_category_effect(spec, spec.prod_cat_vocab)[prod] * math.exp(rng.normal(0, spec.campaign_cost_sd)))
    win_shift = float(rng.normal(0, spec.campaign_win_sd) + 0.1 * (adv - spec.adv_cat_vocab / 2))
    base_bid = float(np.clip(spec.kappa * math.exp(rng.normal(0, 0.4)), *spec.bid_range))
    days = {0: float(math.exp(rng.normal(0, spec.day_cost_sd))), 1: float(math.exp(rng.normal(0, spec.day_cost_sd)))}
    lat = CampaignLatent(cost_scale, win_shift, start, start + duration, base_bid, days)
    cid = f"{spec.name}-{index:05d}"
    camp = Campaign(cid, adv, prod, budget, (0.0, 0.0, 0.0), spec.name)
    hist = generate_campaign_day(spec, camp, 0, spec.policy, rng, lat)
    cost = sum(r.cost for r in hist.records)
    reward = sum(r.reward for r in hist.records)
    clicks = sum(r.count for r in hist.records)
    camp.context = (float(clicks), float(cost), float(reward / cost) if cost > 0 else 0.0)
    camp.latent = {"cost_scale": cost_scale, "win_shift": win_shift, "day_factors": [days[0], days[1]],
                   "start_tick": start, "end_tick": start + duration}
    today = generate_campaign_day(spec, camp, 1, spec.policy, rng, lat)
    return Pair(hist, today)


def header_for(specs: Sequence[ScenarioSpec]) -> DatasetHeader:
    return DatasetHeader(adv_cat_vocab=max(s.adv_cat_vocab for s in specs),
                         prod_cat_vocab=max(s.prod_cat_vocab for s in specs),
                         context_len=3, T_max=max(s.T_max for s in specs))


def generate_pairs(specs: Sequence[ScenarioSpec], n_campaigns_each: int, base_seed: int = 0) -> list[Pair]:
    if n_campaigns_each < 1:
        raise ValueError("n_campaigns_each must be >= 1")
    header = header_for(specs)
    return [generate_pair(s, i, base_seed, header) for s in specs for i in range(n_campaigns_each)]


def generate_dataset(specs: Sequence[ScenarioSpec], n_campaigns_each: int, out_path, base_seed: int = 0) -> Path:
    """Write the dataset file plus a ``.manifest.json`` listing each scenario."""
    out_path = Path(out_path)
    pairs = generate_pairs(specs, n_campaigns_each, base_seed)
    write_dataset(out_path, header_for(specs), pairs)
    manifest = {"scenarios": [s.to_json() for s in specs], "n_campaigns_each": n_campaigns_each,
                "base_seed": base_seed}
    manifest_path(out_path).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out_path


def manifest_path(dataset_path) -> Path:
    p = Path(dataset_path)
    return p.with_name(p.name + ".manifest.json")


def oracle_for(campaign: Campaign, specs: dict) -> OracleHandle:
    """Oracle of the campaign's scenario with its latents; today's day factor is folded in."""
    lat = campaign.latent
    scale = lat.get("cost_scale", 1.0) * (lat.get("day_factors", [1.0, 1.0])[1])
    return OracleHandle(specs[campaign.scenario], scale, lat.get("win_shift", 0.0))


def default_scenarios(T_max: int = 96) -> list[ScenarioSpec]:
    """Eight scenarios along strategy / budget / duration axes."""
    full = (T_max * 3 // 4, T_max)
    return [
        ScenarioSpec("BCB", 11, kappa=20.0, base_scale=3.0, win_bias=-1.8, policy="budget_pacing",
                     budget_range=(800.0, 4000.0), duration_range=full, T_max=T_max),
        ScenarioSpec("TR", 12, kappa=25.0, base_scale=2.5, win_bias=-2.2, win_slope=1.1, roi_mean=3.0,
                     policy="random_walk", budget_range=(1500.0, 6000.0), duration_range=full, T_max=T_max),
        ScenarioSpec("BS", 13, kappa=15.0, base_scale=2.0, win_bias=-1.5, policy="budget_pacing",
                     budget_range=(200.0, 800.0), duration_range=full, T_max=T_max),
        ScenarioSpec("BM", 14, kappa=20.0, base_scale=3.5, win_bias=-2.0, periodic_amp=0.4,
                     policy="budget_pacing", budget_range=(800.0, 3000.0), duration_range=full, T_max=T_max),
        ScenarioSpec("BL", 15, kappa=30.0, base_scale=5.0, win_bias=-2.5, win_slope=1.2,
                     policy="budget_pacing", budget_range=(3000.0, 12000.0), duration_range=full,
                     bid_range=(6.0, 90.0), T_max=T_max),
        ScenarioSpec("D6", 16, kappa=18.0, base_scale=3.0, win_bias=-1.9, policy="random_walk",
                     budget_range=(500.0, 3000.0), duration_range=(T_max // 4, T_max // 2), T_max=T_max),
        ScenarioSpec("D12", 17, kappa=22.0, base_scale=2.8, win_bias=-2.1, periodic_phase=1.0,
                     policy="random_walk", budget_range=(500.0, 3000.0),
                     duration_range=(T_max // 2, T_max * 3 // 4), T_max=T_max),
        ScenarioSpec("D18", 18, kappa=24.0, base_scale=3.2, win_bias=-2.0, periodic_phase=2.0,
                     policy="budget_pacing", budget_range=(1000.0, 5000.0),
                     duration_range=(T_max * 3 // 4, T_max), T_max=T_max),
    ]

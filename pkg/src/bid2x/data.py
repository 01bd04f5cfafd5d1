"""Campaign, record and trajectory types, the dataset file format, and preprocessing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

VARIABLES = ("bid", "tick", "cost", "reward", "count")
CONTROLS = (0, 1)
TARGETS = (2, 3, 4)
TARGET_NAMES = ("cost", "reward", "count")
C0, C1, C2 = 5, 2, 3
FORMAT_VERSION = 1
DEFAULT_T = 96


class DataError(ValueError):
    """Malformed dataset content. ``lines`` lists offending 1-based line numbers."""

    def __init__(self, message: str, lines: Sequence[int] = ()):
        super().__init__(message)
        self.lines = list(lines)


@dataclass(frozen=True)
class BidRecord:
    bid: float
    cost: float
    reward: float
    count: int
    tick: int

    def row(self) -> list:
        return [self.bid, self.cost, self.reward, self.count, self.tick]


@dataclass
class Campaign:
    id: str
    advertiser_category: int
    product_category: int
    budget: float
    context: tuple
    scenario: str = ""
    # generator ground truth; never fed to the model
    latent: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {"id": self.id, "advertiser_category": self.advertiser_category,
             "product_category": self.product_category, "budget": self.budget,
             "context": list(self.context), "scenario": self.scenario}
        if self.latent:
            d["latent"] = self.latent
        return d

    @classmethod
    def from_json(cls, d: dict) -> Campaign:
        return cls(str(d["id"]), int(d["advertiser_category"]), int(d["product_category"]),
                   float(d["budget"]), tuple(float(v) for v in d["context"]),
                   str(d.get("scenario", "")), dict(d.get("latent", {})))


@dataclass
class Trajectory:
    campaign: Campaign
    day: int
    records: list
    complete: bool = True

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)


@dataclass
class Pair:
    history: Trajectory
    today: Trajectory

    @property
    def campaign(self) -> Campaign:
        return self.today.campaign


@dataclass
class DatasetHeader:
    adv_cat_vocab: int
    prod_cat_vocab: int
    context_len: int = 3
    T_max: int = DEFAULT_T
    version: int = FORMAT_VERSION
    variables: tuple = VARIABLES

    def to_json(self) -> dict:
        return {"version": self.version, "variables": list(self.variables),
                "adv_cat_vocab": self.adv_cat_vocab, "prod_cat_vocab": self.prod_cat_vocab,
                "context_len": self.context_len, "T_max": self.T_max}


# -- file format -------------------------------------------------------------

def _parse_records(rows, lineno: int, errors: list) -> list:
    records = []
    last_tick = None
    for row in rows:
        bid, cost, reward, count, tick = row
        vals = (bid, cost, reward, count)
        if not all(math.isfinite(float(v)) for v in vals) or min(vals) < 0:
            errors.append((lineno, "negative or non-finite value"))
            return records
        if last_tick is not None and tick <= last_tick:
            errors.append((lineno, f"non-monotone tick at line {lineno}"))
            return records
        last_tick = tick
        records.append(BidRecord(float(bid), float(cost), float(reward), int(count), int(tick)))
    return records


def load_dataset(path) -> tuple[list[Pair], DatasetHeader]:
    """Read a line-delimited dataset file; the first line is the header object."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].strip():
        raise DataError("missing header line", [1])
    try:
        h = json.loads(lines[0])
        header = DatasetHeader(int(h["adv_cat_vocab"]), int(h["prod_cat_vocab"]), int(h["context_len"]),
                               int(h["T_max"]), int(h["version"]), tuple(h["variables"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"missing or malformed header: {exc}", [1]) from None
    if header.version != FORMAT_VERSION or header.variables != VARIABLES:
        raise DataError(f"unsupported header version/variables: {h}", [1])

    pairs, errors = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            camp = Campaign.from_json(obj["campaign"])
        except (KeyError, ValueError, TypeError) as exc:
            errors.append((lineno, f"malformed line: {exc}"))
            continue
        if not (0 <= camp.advertiser_category < header.adv_cat_vocab
                and 0 <= camp.product_category < header.prod_cat_vocab):
            errors.append((lineno, f"vocabulary overflow at line {lineno}"))
            continue
        if len(camp.context) != header.context_len:
            errors.append((lineno, f"context length {len(camp.context)} != {header.context_len}"))
            continue
        n_err = len(errors)
        hist = _parse_records(obj["history"], lineno, errors)
        today = _parse_records(obj["today"], lineno, errors)
        if len(errors) > n_err:
            continue
        if not hist or not today:
            errors.append((lineno, "empty trajectory"))
            continue
        pairs.append(Pair(Trajectory(camp, 0, hist, True), Trajectory(camp, 1, today, True)))
    if errors:
        detail = "; ".join(f"line {n}: {msg}" for n, msg in errors[:20])
        raise DataError(f"{len(errors)} malformed line(s): {detail}", [n for n, _ in errors])
    if not pairs:
        log.warning("dataset %s contains 0 samples", path)
    return pairs, header


def write_dataset(path, header: DatasetHeader, pairs: Sequence[Pair]) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(header.to_json()) + "\n")
        for p in pairs:
            obj = {"campaign": p.campaign.to_json(),
                   "history": [r.row() for r in p.history.records],
                   "today": [r.row() for r in p.today.records]}
            fh.write(json.dumps(obj) + "\n")


def split_dataset(pairs: Sequence[Pair], ratios=(1, 1, 1), seed: int = 0) -> tuple[list, ...]:
    """Campaign-disjoint deterministic split into len(ratios) parts."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios <= 0):
        raise ValueError("split ratios must be positive")
    ratios = ratios / ratios.sum()
    ids = sorted({p.campaign.id for p in pairs})
    if len(ids) < len(ratios):
        raise ValueError(f"cannot split {len(ids)} campaign(s) into {len(ratios)} parts")
    order = np.random.default_rng(seed).permutation(len(ids))
    bounds = np.round(np.cumsum(ratios) * len(ids)).astype(int)
    # every split receives at least one campaign
    for i in range(len(bounds) - 1):
        lo = bounds[i - 1] if i else 0
        bounds[i] = min(max(bounds[i], lo + 1), len(ids) - (len(bounds) - 1 - i))
    assign = {}
    start = 0
    for k, end in enumerate(bounds):
        for j in order[start:end]:
            assign[ids[j]] = k
        start = end
    parts = tuple([] for _ in ratios)
    for p in pairs:
        parts[assign[p.campaign.id]].append(p)
    return parts


# -- preprocessing -----------------------------------------------------------

def preprocess_today(traj: Trajectory, next_bid: float, next_tick: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Raw token matrix [T x C0] and valid mask [T] for a today-prefix plus the next bid.

    Target columns are shifted right behind an all-zero start token; control
    columns carry each record's own (bid, tick) with (next_bid, next_tick)
    appended at the last occupied slot.
    """
    m = len(traj.records)
    if m + 1 > T:
        raise ValueError(f"prefix of {m} records plus next bid does not fit in T={T}; split the trajectory")
    tokens = np.zeros((T, C0))
    mask = np.zeros(T)
    for s, r in enumerate(traj.records):
        tokens[s, 0], tokens[s, 1] = r.bid, r.tick
        tokens[s + 1, 2:] = (r.cost, r.reward, r.count)
    tokens[m, 0], tokens[m, 1] = next_bid, next_tick
    mask[: m + 1] = 1.0
    return tokens, mask


def history_series(traj: Trajectory, T: int) -> np.ndarray:
    """Per-variable raw series [C0 x T], zero padded."""
    m = len(traj.records)
    if m > T:
        raise ValueError(f"history of {m} records exceeds T={T}")
    out = np.zeros((C0, T))
    for s, r in enumerate(traj.records):
        out[:, s] = (r.bid, r.tick, r.cost, r.reward, r.count)
    return out


@dataclass
class RawBatch:
    hist_series: np.ndarray    # [B, C0, T]
    today_tokens: np.ndarray   # [B, T, C0]
    valid_mask: np.ndarray     # [B, T]
    campaign_cat: np.ndarray   # [B, 2] int
    campaign_cont: np.ndarray  # [B, 1 + context_len]
    targets: np.ndarray        # [B, T, C2]
    cum_targets: np.ndarray    # [B, T, C2]
    hist_mask: np.ndarray      # [B, T]

    def __len__(self) -> int:
        return self.valid_mask.shape[0]

    def subset(self, idx) -> RawBatch:
        return RawBatch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


def build_raw(pairs: Sequence[Pair], T: int) -> RawBatch:
    """Assemble full-day training matrices: slot s predicts today's record s."""
    B = len(pairs)
    hist = np.zeros((B, C0, T))
    tokens = np.zeros((B, T, C0))
    mask = np.zeros((B, T))
    targets = np.zeros((B, T, C2))
    cum = np.zeros((B, T, C2))
    ctx_len = len(pairs[0].campaign.context) if pairs else 0
    cat = np.zeros((B, 2), dtype=np.int64)
    cont = np.zeros((B, 1 + ctx_len))
    hmask = np.zeros((B, T))
    for i, p in enumerate(pairs):
        recs = p.today.records
        prefix = Trajectory(p.campaign, p.today.day, recs[:-1], False)
        tokens[i], mask[i] = preprocess_today(prefix, recs[-1].bid, recs[-1].tick, T)
        hist[i] = history_series(p.history, T)
        hmask[i, :len(p.history.records)] = 1.0
        y = np.array([[r.cost, r.reward, r.count] for r in recs])
        m = len(recs)
        targets[i, :m] = y
        cum[i, :m] = np.cumsum(y[::-1], axis=0)[::-1]
        cat[i] = (p.campaign.advertiser_category, p.campaign.product_category)
        cont[i] = (p.campaign.budget, *p.campaign.context)
    return RawBatch(hist, tokens, mask, cat, cont, targets, cum, hmask)


# -- normalisation -----------------------------------------------------------

# Zero-inflated targets keep shift 0 so that a raw zero stays exactly zero.
_ZERO_ANCHORED = ("cost", "reward", "count")


@dataclass
class NormStats:
    """Per-variable (shift, scale). Every variable but ``tick`` goes through log1p first."""
    shift: dict
    scale: dict

    def forward(self, name: str, x):
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise DataError(f"non-finite raw value in variable {name!r}")
        z = x if name == "tick" else np.log1p(x)
        return (z - self.shift[name]) / self.scale[name]

    def inverse(self, name: str, z):
        z = np.asarray(z, dtype=np.float64) * self.scale[name] + self.shift[name]
        return z if name == "tick" else np.expm1(z)

    def to_json(self) -> dict:
        return {"shift": self.shift, "scale": self.scale}

    @classmethod
    def from_json(cls, d: dict) -> NormStats:
        return cls({k: float(v) for k, v in d["shift"].items()}, {k: float(v) for k, v in d["scale"].items()})


def _cont_names(n: int) -> list[str]:
    return ["budget"] + [f"context{j}" for j in range(n - 1)]


def fit_stats(raw: RawBatch, T_max: int) -> NormStats:
    """Normalisation statistics computed on valid (non-pad) entries only."""
    shift, scale = {"tick": 0.0}, {"tick": float(T_max)}
    valid = raw.valid_mask > 0

    def put(name, values, anchored=False):
        z = np.log1p(np.asarray(values, dtype=np.float64))
        if anchored:
            shift[name] = 0.0
            s = float(np.sqrt(np.mean(z * z))) if z.size else 1.0
        else:
            shift[name] = float(z.mean()) if z.size else 0.0
            s = float(z.std()) if z.size else 1.0
        scale[name] = s if s > 1e-8 else 1.0

    put("bid", raw.today_tokens[..., 0][valid])
    for j, name in enumerate(TARGET_NAMES):
        put(name, raw.targets[..., j][valid], anchored=True)
        put("cum_" + name, raw.cum_targets[..., j][valid])
    for j, name in enumerate(_cont_names(raw.campaign_cont.shape[1])):
        put(name, raw.campaign_cont[:, j])
    return NormStats(shift, scale)


@dataclass
class PreparedBatch:
    hist_series: np.ndarray
    today_tokens: np.ndarray
    valid_mask: np.ndarray
    campaign_cat: np.ndarray
    campaign_cont: np.ndarray
    targets: np.ndarray
    cum_targets: np.ndarray
    targets_raw: np.ndarray
    cum_raw: np.ndarray
    norm_stats: NormStats

    def __len__(self) -> int:
        return self.valid_mask.shape[0]

    def subset(self, idx) -> PreparedBatch:
        vals = [getattr(self, f)[idx] for f in self.__dataclass_fields__ if f != "norm_stats"]
        return PreparedBatch(*vals, self.norm_stats)


def normalize(raw: RawBatch, stats: NormStats | None = None, T_max: int | None = None) -> PreparedBatch:
    """Apply log1p + standardisation per variable; fits stats from ``raw`` when none are given."""
    if stats is None:
        stats = fit_stats(raw, T_max or raw.valid_mask.shape[1])
    names = list(VARIABLES)
    valid = raw.valid_mask[..., None]
    tokens = np.stack([stats.forward(n, raw.today_tokens[..., j]) for j, n in enumerate(names)], -1)
    # the start token and padding stay exactly zero
    occupied = np.zeros_like(raw.today_tokens, dtype=bool)
    occupied[..., :2] = valid > 0
    occupied[:, 1:, 2:] = valid[:, 1:] > 0
    tokens = np.where(occupied, tokens, 0.0)
    hist = np.stack([stats.forward(n, raw.hist_series[:, j]) for j, n in enumerate(names)], 1)
    hist = hist * raw.hist_mask[:, None, :]
    targets = np.stack([stats.forward(n, raw.targets[..., j]) for j, n in enumerate(TARGET_NAMES)], -1) * valid
    cum = np.stack([stats.forward("cum_" + n, raw.cum_targets[..., j])
                    for j, n in enumerate(TARGET_NAMES)], -1) * valid
    cont = np.stack([stats.forward(n, raw.campaign_cont[:, j])
                     for j, n in enumerate(_cont_names(raw.campaign_cont.shape[1]))], -1)
    return PreparedBatch(hist, tokens, raw.valid_mask.copy(), raw.campaign_cat.copy(), cont,
                         targets, cum, raw.targets.copy(), raw.cum_targets.copy(), stats)


def denormalize_targets(stats: NormStats, z: np.ndarray, cumulative: bool = False) -> np.ndarray:
    """Inverse-transform a [..., C2] array of normalised target predictions."""
    prefix = "cum_" if cumulative else ""
    return np.stack([stats.inverse(prefix + n, z[..., j]) for j, n in enumerate(TARGET_NAMES)], -1)


def prepare(pairs: Sequence[Pair], T: int, stats: NormStats | None = None) -> PreparedBatch:
    return normalize(build_raw(pairs, T), stats, T)

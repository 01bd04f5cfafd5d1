"""Deterministic mini-batch training, checkpoint persistence and finetuning."""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .data import DatasetHeader, NormStats, Pair, PreparedBatch, prepare
from .model import Bid2X, ModelConfig

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when a loss or gradient goes non-finite."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    max_steps: int = 0          # 0 means no cap beyond ``epochs``
    gamma: float = 1.0
    D: int = 64
    n_layers: int = 2
    n_heads: int = 1
    seed: int = 0
    grad_clip: float = 1.0
    T_max: int = 96
    eval_every: int = 0         # extra validation every N steps; 0 means per epoch only
    per_variable_history: bool = False
    softplus_value: bool = False
    no_va: bool = False
    no_ta: bool = False
    no_zip: bool = False

    def __post_init__(self):
        for name in ("lr", "batch_size", "D", "n_layers", "n_heads", "T_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs", "max_steps", "gamma", "grad_clip", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    def model_config(self, header: DatasetHeader) -> ModelConfig:
        return ModelConfig(T=self.T_max, D=self.D, n_layers=self.n_layers, n_heads=self.n_heads,
                           adv_cat_vocab=header.adv_cat_vocab, prod_cat_vocab=header.prod_cat_vocab,
                           n_cont=1 + header.context_len, seed=self.seed,
                           per_variable_history=self.per_variable_history, softplus_value=self.softplus_value,
                           no_va=self.no_va, no_ta=self.no_ta, no_zip=self.no_zip)


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray | None], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


@dataclass
class Checkpoint:
    train_config: TrainConfig
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    norm_stats: NormStats
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    rng_state: dict | None = None
    scenarios: list = field(default_factory=list)   # scenario names seen in training

    def build_model(self) -> Bid2X:
        model = Bid2X(self.model_config)
        model.load_state_dict(self.params)
        return model


def _snapshot(model: Bid2X, opt: Adam, cfg: TrainConfig, stats: NormStats, step: int, epoch: int,
              rng: np.random.Generator, scenarios: list) -> Checkpoint:
    return Checkpoint(cfg, model.config, {k: v.copy() for k, v in model.state_dict().items()}, stats,
                      {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()},
                      step, epoch, rng.bit_generator.state, scenarios)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Zip container: ``manifest.json`` plus one little-endian float64 buffer per tensor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for group, d in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for k, v in d.items():
            tensors[f"{group}/{k}"] = np.asarray(v, dtype="<f8")
    manifest = {
        "version": CHECKPOINT_VERSION,
        "train_config": ckpt.train_config.to_json(),
        "model_config": ckpt.model_config.to_json(),
        "norm_stats": ckpt.norm_stats.to_json(),
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "scenarios": ckpt.scenarios,
        "tensors": {k: list(v.shape) for k, v in tensors.items()},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        for k, v in tensors.items():
            zf.writestr(f"tensors/{k}.f8", np.ascontiguousarray(v).tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}")
        groups: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for key, shape in manifest["tensors"].items():
            group, name = key.split("/", 1)
            buf = zf.read(f"tensors/{key}.f8")
            if len(buf) != 8 * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"tensor {key}: buffer size does not match shape {shape}")
            groups[group][name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    model_config = ModelConfig.from_json(manifest["model_config"])
    expected = {k: v.shape for k, v in Bid2X(model_config).state_dict().items()}
    for k, shape in expected.items():
        if k not in groups["param"]:
            raise CheckpointError(f"checkpoint is missing parameter {k}")
        if groups["param"][k].shape != shape:
            raise CheckpointError(f"shape mismatch for {k}: {groups['param'][k].shape} vs config {shape}")
    extra = set(groups["param"]) - set(expected)
    if extra:
        raise CheckpointError(f"unexpected parameters: {sorted(extra)}")
    return Checkpoint(TrainConfig.from_json(manifest["train_config"]), model_config, groups["param"],
                      NormStats.from_json(manifest["norm_stats"]), groups["adam_m"], groups["adam_v"],
                      manifest["step"], manifest["epoch"], manifest["rng_state"], manifest.get("scenarios", []))


def _jsonable(x):
    return float(x) if isinstance(x, (np.floating, float)) else x


class MetricsLog:
    """Line-delimited JSON records, optionally mirrored to a file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        record = {k: _jsonable(v) for k, v in record.items()}
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    metrics: list[dict]
    best_val_loss: float
    final_val_loss: float


def validation_loss(model: Bid2X, batch: PreparedBatch, gamma: float, chunk: int = 64) -> float:
    """Slot-weighted mean of the total loss over ``batch``."""
    from .autograd import no_grad

    total, weight = 0.0, 0.0
    with no_grad():
        for start in range(0, len(batch), chunk):
            part = batch.subset(slice(start, start + chunk))
            n = float(part.valid_mask.sum())
            if n == 0:
                continue
            _, report = model.loss(part, gamma)
            total += report.total * n
            weight += n
    return total / weight if weight else float("nan")


def _scenarios_of(pairs: Sequence[Pair]) -> list[str]:
    return sorted({p.campaign.scenario for p in pairs})


def _run(model: Bid2X, opt: Adam, cfg: TrainConfig, train_batch: PreparedBatch, val_batch: PreparedBatch | None,
         log: MetricsLog, rng: np.random.Generator, step0: int, scenarios: list) -> TrainResult:
    from .evaluation import evaluate

    stats = train_batch.norm_stats
    step = step0
    params = opt.params
    last = _snapshot(model, opt, cfg, stats, step, 0, rng, scenarios)
    best, best_loss, final_loss = last, float("inf"), float("nan")

    def validate(epoch: int, tag: dict) -> None:
        nonlocal best, best_loss, final_loss
        if val_batch is None:
            return
        report = evaluate(model, val_batch)
        for name, m in report.per_target.items():
            log.write({**tag, "split": "val", "target": name, "MAE": m["MAE"], "RMSE": m["RMSE"]})
        final_loss = validation_loss(model, val_batch, cfg.gamma)
        log.write({**tag, "split": "val", "loss": final_loss})
        if final_loss < best_loss:
            best_loss = final_loss
            best = _snapshot(model, opt, cfg, stats, step, epoch, rng, scenarios)

    n = len(train_batch)
    done = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = train_batch.subset(order[start:start + cfg.batch_size])
            if batch.valid_mask.sum() == 0:
                continue
            loss, report = model.loss(batch, cfg.gamma)
            bad = report.first_nonfinite()
            if bad is not None:
                raise TrainingError(f"non-finite {bad} at step {step + 1}: {report.to_json()}")
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {k: p.grad for k, p in params.items()}
            gnorm = clip_grad_norm(grads, cfg.grad_clip)
            if not math.isfinite(gnorm):
                raise TrainingError(f"non-finite gradient norm at step {step + 1}")
            opt.step(grads)
            step += 1
            log.write({"step": step, "zip_loss": report.zip_loss, "bce": report.bce_part, "mse": report.mse_part,
                       "cum_loss": report.cum_loss, "total": report.total, "lr": opt.lr})
            if cfg.eval_every and step % cfg.eval_every == 0:
                validate(epoch, {"epoch": epoch, "step": step})
            if cfg.max_steps and step - step0 >= cfg.max_steps:
                done = True
                break
        if not (cfg.eval_every and step % cfg.eval_every == 0):
            validate(epoch, {"epoch": epoch})
        last = _snapshot(model, opt, cfg, stats, step, epoch, rng, scenarios)
        if done:
            break
    if val_batch is None:
        best = last
    return TrainResult(best, last, log.records, best_loss, final_loss)


def train(cfg: TrainConfig, train_pairs: Sequence[Pair], val_pairs: Sequence[Pair] | None, header: DatasetHeader,
          metrics_path=None) -> TrainResult:
    """Fit a fresh model; normalisation stats come from ``train_pairs`` only."""
    if not train_pairs:
        raise ValueError("empty training split")
    if header.T_max != cfg.T_max:
        raise ValueError(f"config T_max={cfg.T_max} does not match dataset T_max={header.T_max}")
    train_batch = prepare(train_pairs, cfg.T_max)
    val_batch = prepare(val_pairs, cfg.T_max, train_batch.norm_stats) if val_pairs else None
    model = Bid2X(cfg.model_config(header))
    opt = Adam(model.named_parameters(), cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    return _run(model, opt, cfg, train_batch, val_batch, MetricsLog(metrics_path), rng, 0,
                _scenarios_of(train_pairs))


def campaign_subsample(pairs: Sequence[Pair], fraction: float, seed: int) -> list[Pair]:
    """Seeded subsample of whole campaigns covering ``fraction`` of them (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    ids = sorted({p.campaign.id for p in pairs})
    k = max(1, int(round(fraction * len(ids))))
    chosen = {ids[i] for i in np.random.default_rng([seed, 2]).permutation(len(ids))[:k]}
    return [p for p in pairs if p.campaign.id in chosen]


def finetune(ckpt: Checkpoint, pairs: Sequence[Pair], fraction: float, cfg: TrainConfig | None = None,
             val_pairs: Sequence[Pair] | None = None, metrics_path=None) -> TrainResult:
    """Continue optimisation from ``ckpt`` on a campaign-disjoint fraction of ``pairs``.

    The checkpoint's normalisation stats are kept so the model sees inputs on its trained scale.
    """
    cfg = cfg or ckpt.train_config
    subset = campaign_subsample(pairs, fraction, cfg.seed)
    model = ckpt.build_model()
    opt = Adam(model.named_parameters(), cfg.lr)
    if ckpt.adam_m:
        for k in opt.m:
            opt.m[k][...] = ckpt.adam_m[k]
            opt.v[k][...] = ckpt.adam_v[k]
        opt.t = ckpt.step
    train_batch = prepare(subset, ckpt.model_config.T, ckpt.norm_stats)
    val_batch = prepare(val_pairs, ckpt.model_config.T, ckpt.norm_stats) if val_pairs else None
    rng = np.random.default_rng([cfg.seed, 3])
    scenarios = sorted(set(ckpt.scenarios) | set(_scenarios_of(subset)))
    return _run(model, opt, cfg, train_batch, val_batch, MetricsLog(metrics_path), rng, ckpt.step, scenarios)

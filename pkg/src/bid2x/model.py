"""The assembled environment model: embeddings -> encoder/decoder -> fusion -> heads."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import C0, TARGETS, PreparedBatch
from .embedding import Embedding
from .heads import LossReport, TargetHeads, cum_loss, total_loss, zip_loss_parts
from .layers import Module
from .transformer import TemporalDecoder, VariableAwareFusion, VariableEncoder


@dataclass
class ModelConfig:
    T: int = 96
    D: int = 64
    n_layers: int = 2
    n_heads: int = 1
    adv_cat_vocab: int = 8
    prod_cat_vocab: int = 12
    n_cont: int = 4
    seed: int = 0
    per_variable_history: bool = False
    softplus_value: bool = False
    # ablations
    no_va: bool = False
    no_ta: bool = False
    no_zip: bool = False

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ModelOutput:
    p: list            # per target: Tensor [B, T] or None
    y_tilde: list
    y_hat: list
    y_cum: list

    def stacked(self, name: str) -> np.ndarray:
        return np.stack([t.data for t in getattr(self, name)], axis=-1)


class Bid2X(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        D = config.D
        self.embedding = Embedding(rng, config.T, C0, D, (config.adv_cat_vocab, config.prod_cat_vocab),
                                   config.n_cont, config.per_variable_history)
        self.encoder = VariableEncoder(rng, D, config.n_layers, config.n_heads)
        self.decoder = TemporalDecoder(rng, D, config.n_layers, config.n_heads)
        self.fusion = VariableAwareFusion(rng, D)
        self.heads = [TargetHeads(rng, D, config.softplus_value) for _ in TARGETS]

    def forward(self, batch: PreparedBatch) -> ModelOutput:
        cfg = self.config
        camp = self.embedding.embed_campaign(batch.campaign_cat, batch.campaign_cont)
        tokens = batch.today_tokens
        if cfg.no_ta:
            tokens = tokens.copy()
            tokens[..., 2:] = 0.0
        h_tem = self.decoder(self.embedding.embed_today(tokens, camp), batch.valid_mask)
        # fusion and heads run on valid slots only; pad slots come back as exact zeros
        rows = np.nonzero(batch.valid_mask > 0)
        h_tem_rows = ag.gather(h_tem, rows)
        if cfg.no_va:
            fused = [h_tem_rows for _ in TARGETS]
        else:
            h_var = self.encoder(self.embedding.embed_history(batch.hist_series, camp))
            fused = self.fusion([ag.take_rows(h_var[:, i, :], rows[0]) for i in TARGETS], h_tem_rows)
        shape = batch.valid_mask.shape
        out = ModelOutput([], [], [], [])
        for heads, h in zip(self.heads, fused):
            p, y_tilde, y_hat, y_cum = heads(h, use_zip=not cfg.no_zip)
            out.p.append(None if p is None else ag.scatter(p, rows, shape))
            out.y_tilde.append(ag.scatter(y_tilde, rows, shape))
            out.y_hat.append(ag.scatter(y_hat, rows, shape))
            out.y_cum.append(ag.scatter(y_cum, rows, shape))
        return out

    __call__ = forward

    def loss(self, batch: PreparedBatch, gamma: float = 1.0, out: ModelOutput | None = None) -> tuple[Tensor, LossReport]:
        out = out or self.forward(batch)
        mask = batch.valid_mask
        zip_total, bce_sum, mse_sum, per_target = None, 0.0, 0.0, {}
        for j in range(len(TARGETS)):
            bce, mse = zip_loss_parts(out.p[j], out.y_hat[j], batch.targets[..., j], batch.targets_raw[..., j], mask)
            term = mse if bce is None else bce + mse
            zip_total = term if zip_total is None else zip_total + term
            b = 0.0 if bce is None else bce.item()
            bce_sum += b
            mse_sum += mse.item()
            per_target[j] = {"bce": b, "mse": mse.item()}
        cum = cum_loss(out.y_cum, [batch.cum_targets[..., j] for j in range(len(TARGETS))], mask)
        total = total_loss(zip_total, cum, gamma)
        report = LossReport(total.item(), zip_total.item(), bce_sum, mse_sum, cum.item(), int(mask.sum()), per_target)
        return total, report

    def predict(self, batch: PreparedBatch) -> ModelOutput:
        with ag.no_grad():
            return self.forward(batch)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}")
            p.data[...] = state[k]

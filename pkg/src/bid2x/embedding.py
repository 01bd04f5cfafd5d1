"""Series, token and campaign embeddings."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import Linear, Module, uniform_init


def positional_encoding(T: int, D: int) -> np.ndarray:
    """Fixed sinusoidal table: p[i, 2d] = sin(i / (2T)^(2d/D)), p[i, 2d+1] = cos(same)."""
    i = np.arange(T)[:, None]
    even = np.arange(0, D, 2)
    angle = i / (2.0 * T) ** (even / D)
    P = np.zeros((T, D))
    P[:, 0::2] = np.sin(angle)
    P[:, 1::2] = np.cos(angle[:, : D // 2])
    return P


class CampaignEmbedding(Module):
    """Sum of categorical lookups and per-feature continuous projections."""

    def __init__(self, rng: np.random.Generator, vocab_sizes: tuple, n_cont: int, D: int):
        self.vocab_sizes = tuple(vocab_sizes)
        self.tables = [uniform_init(rng, (k, D), k) for k in self.vocab_sizes]
        self.cont = [Linear(rng, 1, D) for _ in range(n_cont)]
        for proj in self.cont:
            proj.bias.data[:] = 0.0

    def __call__(self, cat: np.ndarray, cont) -> Tensor:
        cat = np.asarray(cat, dtype=np.int64)
        cont = ag.as_tensor(cont)
        for j, k in enumerate(self.vocab_sizes):
            bad = (cat[..., j] < 0) | (cat[..., j] >= k)
            if np.any(bad):
                raise IndexError(f"categorical feature {j}: index {cat[..., j][bad].tolist()} outside vocab {k}")
        out = None
        for j, table in enumerate(self.tables):
            e = ag.take_rows(table, cat[..., j])
            out = e if out is None else out + e
        for j, proj in enumerate(self.cont):
            e = proj(cont[..., j:j + 1])
            out = e if out is None else out + e
        return out


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, T: int, C0: int, D: int, vocab_sizes: tuple, n_cont: int,
                 per_variable_history: bool = False):
        self.T, self.D, self.C0 = T, D, C0
        self.per_variable_history = per_variable_history
        shape = (C0, T, D) if per_variable_history else (T, D)
        self.W_hist = uniform_init(rng, shape, T)
        self.W_today = uniform_init(rng, (C0, D), C0)
        self.tick_embed = Linear(rng, 1, D)
        self.campaign = CampaignEmbedding(rng, vocab_sizes, n_cont, D)
        self.P = positional_encoding(T, D)

    def embed_campaign(self, cat, cont) -> Tensor:
        return self.campaign(cat, cont)

    def embed_history(self, hist, camp: Tensor | None) -> Tensor:
        """[B, C0, T] normalised series -> [B, C0, D]."""
        hist = ag.as_tensor(hist)
        if self.per_variable_history:
            z = ag.matmul(ag.reshape(hist, hist.shape[:-1] + (1, self.T)), self.W_hist)
            z = ag.reshape(z, hist.shape[:-1] + (self.D,))
        else:
            z = ag.matmul(hist, self.W_hist)
        if camp is not None:
            z = z + ag.reshape(camp, camp.shape[:-1] + (1, self.D))
        return z

    def embed_today(self, tokens, camp: Tensor | None, tick_col: int = 1) -> Tensor:
        """[B, T, C0] preprocessed tokens -> [B, T, D] with positional encoding."""
        tokens = ag.as_tensor(tokens)
        z = ag.matmul(tokens, self.W_today)
        z = z + self.tick_embed(tokens.data[..., tick_col:tick_col + 1])
        z = z + self.P[: tokens.shape[-2]]
        if camp is not None:
            z = z + ag.reshape(camp, camp.shape[:-1] + (1, self.D))
        return z

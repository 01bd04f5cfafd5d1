"""Variable-attention encoder, causal temporal decoder and variable-aware fusion."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import NEG_INF, Tensor
from .layers import MLP, LayerNorm, Module, uniform_init


def causal_mask(T: int) -> np.ndarray:
    """Boolean [T, T], True above the diagonal (future keys)."""
    return np.triu(np.ones((T, T), dtype=bool), k=1)


class AttentionBlock(Module):
    """Attention -> residual + LN -> shared FFN -> residual + LN."""

    def __init__(self, rng: np.random.Generator, D: int, n_heads: int = 1):
        if D % n_heads:
            raise ValueError(f"D={D} not divisible by n_heads={n_heads}")
        self.D, self.n_heads = D, n_heads
        self.Wq = uniform_init(rng, (D, D), D)
        self.Wk = uniform_init(rng, (D, D), D)
        self.Wv = uniform_init(rng, (D, D), D)
        self.ffn = MLP(rng, D, 4 * D, D)
        self.ln1 = LayerNorm(D)
        self.ln2 = LayerNorm(D)
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, _ = x.shape
        h = self.n_heads
        x = ag.reshape(x, (*lead, n, h, self.D // h))
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return ag.permute(x, axes)

    def _merge(self, x: Tensor) -> Tensor:
        *lead, h, n, dh = x.shape
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return ag.reshape(ag.permute(x, axes), (*lead, n, h * dh))

    def __call__(self, x: Tensor, disallowed: np.ndarray | None = None) -> Tensor:
        q, k, v = x @ self.Wq, x @ self.Wk, x @ self.Wv
        if self.n_heads > 1:
            q, k, v = self._split(q), self._split(k), self._split(v)
        scores = (q @ ag.transpose(k)) * (1.0 / np.sqrt(self.D))
        if disallowed is not None:
            if self.n_heads > 1:
                disallowed = disallowed[..., None, :, :]
            scores = scores + np.where(disallowed, NEG_INF, 0.0)
        attn = ag.softmax_lastdim(scores)
        self.last_attention = attn.data
        ctx = attn @ v
        if self.n_heads > 1:
            ctx = self._merge(ctx)
        h = self.ln1(x + ctx)
        return self.ln2(h + self.ffn(h))


class VariableEncoder(Module):
    """Full attention across variable tokens; permutation-equivariant over rows."""

    def __init__(self, rng: np.random.Generator, D: int, n_layers: int = 2, n_heads: int = 1):
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.blocks = [AttentionBlock(rng, D, n_heads) for _ in range(n_layers)]

    def __call__(self, z: Tensor) -> Tensor:
        for blk in self.blocks:
            z = blk(z)
        return z


class TemporalDecoder(Module):
    """Causal attention over time slots with key padding; pad rows are zeroed after each block."""

    def __init__(self, rng: np.random.Generator, D: int, n_layers: int = 2, n_heads: int = 1):
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.blocks = [AttentionBlock(rng, D, n_heads) for _ in range(n_layers)]

    def __call__(self, z: Tensor, valid_mask: np.ndarray | None = None) -> Tensor:
        T = z.shape[-2]
        disallowed = causal_mask(T)
        keep = None
        if valid_mask is not None:
            valid_mask = np.asarray(valid_mask, dtype=bool)
            disallowed = disallowed | ~valid_mask[..., None, :]
            keep = valid_mask[..., None].astype(np.float64)
        for blk in self.blocks:
            z = blk(z, disallowed)
            if keep is not None:
                z = z * keep
        return z


class VariableAwareFusion(Module):
    """Gate temporal states with a target variable's encoder representation.

    The first fusion layer acting on concat(h_i, H_tem) is computed as
    h_i @ W_a + H_tem @ W_b, identical to the broadcast concatenation.
    """

    def __init__(self, rng: np.random.Generator, D: int):
        self.D = D
        self.mlp = MLP(rng, 2 * D, 4 * D, D)

    def gate_preactivation(self, h_var: Tensor, h_tem: Tensor, tem_part: Tensor | None = None) -> Tensor:
        W1 = self.mlp.fc1.weight
        if tem_part is None:
            tem_part = h_tem @ W1[self.D:]
        var_part = h_var @ W1[: self.D] + self.mlp.fc1.bias
        if var_part.ndim < tem_part.ndim:
            var_part = ag.reshape(var_part, var_part.shape[:-1] + (1, var_part.shape[-1]))
        return self.mlp.fc2(ag.relu(tem_part + var_part))

    def __call__(self, h_var_targets: list[Tensor], h_tem: Tensor) -> list[Tensor]:
        """h_var rows are [B, D] against h_tem [B, T, D], or row-aligned [N, D] against [N, D]."""
        tem_part = h_tem @ self.mlp.fc1.weight[self.D:]
        return [ag.sigmoid(self.gate_preactivation(h, h_tem, tem_part)) * h_tem for h in h_var_targets]

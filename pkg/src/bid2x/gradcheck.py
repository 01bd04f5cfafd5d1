"""Central finite-difference checks for the autodiff backbone and the model."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autograd as ag


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-based relative error; ``floor`` bounds the denominator for near-zero gradients."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-6,
                 coords: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x`` (mutated in place, then restored).

    When ``coords`` is given only those entries are perturbed; the rest of the
    returned array is NaN.
    """
    out = np.full(x.shape, np.nan) if coords is not None else np.zeros(x.shape)
    it = coords if coords is not None else list(np.ndindex(*x.shape))
    for idx in it:
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        out[idx] = (fp - fm) / (2 * step)
    return out


def check_function(fn: Callable[..., ag.Tensor], inputs: Sequence[np.ndarray],
                   step: float = 1e-6, seed: int = 0) -> float:
    """Max relative error between analytic and numeric gradients of ``sum(w * fn(*inputs))``.

    A fixed random weighting ``w`` makes the check sensitive to every output entry.
    """
    tensors = [ag.parameter(x) for x in inputs]
    out = fn(*tensors)
    w = np.random.default_rng(seed).standard_normal(out.shape)
    loss = (out * w).sum()
    ag.backward(loss)
    worst = 0.0
    for t in tensors:
        def f():
            with ag.no_grad():
                return float((fn(*[ag.Tensor(s.data) for s in tensors]).data * w).sum())
        num = numeric_grad(f, t.data, step)
        worst = max(worst, relative_error(t.grad, num))
    return worst


def check_model_loss(loss_fn: Callable[[], ag.Tensor], params: dict[str, ag.Tensor],
                     n_coords: int = 6, step: float = 1e-6, seed: int = 0,
                     floor: float = 1e-5) -> dict[str, float]:
    """Per-parameter relative error on a random subset of coordinates of each tensor."""
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    ag.backward(loss_fn())

    def f():
        with ag.no_grad():
            return loss_fn().item()

    report = {}
    for name, p in params.items():
        flat = rng.choice(p.size, size=min(n_coords, p.size), replace=False)
        coords = [np.unravel_index(i, p.shape) for i in sorted(flat)]
        num = numeric_grad(f, p.data, step, coords)
        sel = tuple(np.array(coords).T)
        analytic = p.grad[sel] if p.grad is not None else np.zeros(len(coords))
        report[name] = relative_error(analytic, num[sel], floor)
    return report


def model_gradcheck(n_samples: int = 4, T: int = 16, D: int = 16, seed: int = 0, n_coords: int = 6,
                    step: float = 3e-6, **model_kw) -> dict[str, float]:
    """Finite-difference check of the full training loss on a small synthetic batch."""
    from .data import prepare
    from .model import Bid2X, ModelConfig
    from .synth import default_scenarios, generate_pairs, header_for

    specs = default_scenarios(T_max=T)
    pairs = generate_pairs(specs, 1, base_seed=seed)[:n_samples]
    header = header_for(specs)
    model = Bid2X(ModelConfig(T=T, D=D, adv_cat_vocab=header.adv_cat_vocab, prod_cat_vocab=header.prod_cat_vocab,
                              seed=seed, **model_kw))
    batch = prepare(pairs, T)
    return check_model_loss(lambda: model.loss(batch)[0], model.named_parameters(), n_coords, step, seed)

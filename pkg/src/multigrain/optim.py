"""Adam and LAMB updates over name->Tensor parameter dicts, plus LR schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import NumericError

LAMB_MAX_TRUST = 10.0


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    weight_decay: float = 0.0


@dataclass
class OptimState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: dict[str, Tensor]) -> None:
        for n, p in params.items():
            if n not in self.m:
                self.m[n] = np.zeros_like(p.data)
                self.v[n] = np.zeros_like(p.data)
            elif self.m[n].shape != p.shape:
                raise ValueError(f"optimizer state for {n} has shape {self.m[n].shape}, param {p.shape}")


def _check_grads(params):
    for n, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in {n}")


def _adam_direction(name, p, state, hyper, t):
    g = p.grad
    m = state.m[name]
    v = state.v[name]
    m *= hyper.beta1
    m += (1.0 - hyper.beta1) * g
    v *= hyper.beta2
    v += (1.0 - hyper.beta2) * (g * g)
    m_hat = m / (1.0 - hyper.beta1 ** t)
    v_hat = v / (1.0 - hyper.beta2 ** t)
    return m_hat / (np.sqrt(v_hat) + hyper.eps)


def adam_step(params: dict[str, Tensor], state: OptimState, hyper: AdamHyper) -> None:
    """One bias-corrected Adam update (decoupled weight decay). Params without grad are skipped."""
    _check_grads(params)
    state.ensure(params)
    state.step += 1
    t = state.step
    for n, p in params.items():
        if p.grad is None:
            continue
        update = _adam_direction(n, p, state, hyper, t)
        if hyper.weight_decay:
            update = update + hyper.weight_decay * p.data
        p.data -= (hyper.lr * update).astype(p.dtype, copy=False)


def trust_ratio(w: np.ndarray, update: np.ndarray) -> float:
    w_norm = float(np.linalg.norm(w))
    u_norm = float(np.linalg.norm(update))
    if w_norm == 0.0 or u_norm == 0.0:
        return 1.0
    return min(max(w_norm / u_norm, 0.0), LAMB_MAX_TRUST)


def lamb_step(params: dict[str, Tensor], state: OptimState, hyper: AdamHyper) -> None:
    """Adam direction rescaled per tensor by ``||w|| / ||update||``, clipped to [0, 10]."""
    _check_grads(params)
    state.ensure(params)
    state.step += 1
    t = state.step
    for n, p in params.items():
        if p.grad is None:
            continue
        update = _adam_direction(n, p, state, hyper, t)
        if hyper.weight_decay:
            update = update + hyper.weight_decay * p.data
        ratio = trust_ratio(p.data, update)
        p.data -= (hyper.lr * ratio * update).astype(p.dtype, copy=False)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


def linear_schedule(step: int, base_lr: float, warmup: int, total: int) -> float:
    """Linear warmup to ``base_lr`` over ``warmup`` steps, then linear decay to 0 at ``total``.

    ``step`` is 0-based (the update about to be applied).
    """
    if warmup > 0 and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))

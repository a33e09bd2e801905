"""AdamW with decoupled weight decay, plus the warmup + multi-step LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimError(RuntimeError):
    """Non-finite gradients or misconfigured schedule."""


@dataclass
class OptimState:
    """Per-parameter Adam moments keyed by parameter name."""

    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_apply(params: dict, grads: dict, state: OptimState, lr) -> None:
    """One decoupled-weight-decay Adam step, in place.

    ``params`` maps name -> Tensor, ``grads`` name -> ndarray (missing or None
    means zero gradient; the parameter still decays). ``lr`` is a float applied
    to every parameter, or a name -> float mapping.
    """
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        rate = lr[name] if isinstance(lr, dict) else lr
        if rate <= 0:
            raise OptimError(f"learning rate must be positive, got {rate} for '{name}'")
        if g is None and name not in state.m:
            # untouched so far: moments are identically zero, only decay acts
            if state.weight_decay:
                p.data -= rate * state.weight_decay * p.data
            continue
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient for parameter '{name}'")
        if g.shape != p.data.shape:
            raise OptimError(f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p.data -= rate * state.weight_decay * p.data
        p.data -= rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from ``warmup_factor * base``, then step decay at milestones."""

    base: float
    warmup_iters: int = 0
    warmup_factor: float = 0.25
    milestones: tuple = ()
    decay: float = 0.1

    def __post_init__(self):
        if any(b >= a for a, b in zip(self.milestones[1:], self.milestones)):
            raise OptimError(f"milestones must be strictly increasing, got {self.milestones}")

    def __call__(self, step: int) -> float:
        if step < 0:
            raise OptimError(f"step must be >= 0, got {step}")
        if self.warmup_iters > 0 and step < self.warmup_iters:
            frac = step / self.warmup_iters
            return self.base * (self.warmup_factor + (1.0 - self.warmup_factor) * frac)
        n_passed = sum(1 for ms in self.milestones if step >= ms)
        return self.base * self.decay ** n_passed


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def collect_grads(params: dict) -> dict:
    """Snapshot name -> gradient array (zeros for untouched parameters)."""
    return {name: p.grad_array() for name, p in params.items()}


def param_checksum(params: dict) -> str:
    """Bit-stable hex fingerprint of all parameter values, order-independent of insertion."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(params.items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()

"""
AdamW with decoupled weight decay.

    m_t = b1 m + (1 - b1) g
    v_t = b2 v + (1 - b2) g^2
    p  <- p - lr wd p                      (decay, independent of g)
    p  <- p - lr m_hat / (sqrt(v_hat) + eps)
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from src.autodiff import Tensor
from src.errors import OptimError

logger = logging.getLogger("DuoField.Optim")


@dataclass
class AdamWState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.lr > 0.0:
            raise OptimError(f"learning rate must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise OptimError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps < 0.0 or self.weight_decay < 0.0:
            raise OptimError(f"eps and weight_decay must be non-negative, got {self.eps}, {self.weight_decay}")


def adamw_step(state: AdamWState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               lr: Optional[float] = None) -> dict[str, np.ndarray]:
    """One bias-corrected AdamW update, in place. Parameters without a gradient only decay."""
    for name, grad in grads.items():
        if grad is not None and not np.all(np.isfinite(grad)):
            raise OptimError(f"non-finite gradient for parameter {name!r}")
    lr = state.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def cosine_lr(base_lr: float, step: int, total: int, floor: float = 0.0) -> float:
    """Half-cosine decay from base_lr at step 0 to floor * base_lr at `total`."""
    if total <= 0:
        return base_lr
    progress = min(step, total) / total
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


class AdamW:
    """
    Optimizer over named tensors, organised in groups that each carry
    their own learning rate and weight decay.
    """

    def __init__(self, groups: dict[str, dict], betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8) -> None:
        # groups: {group: {"params": {name: Tensor}, "lr": float, "weight_decay": float}}
        self.groups: dict[str, dict[str, Tensor]] = {}
        self.states: dict[str, AdamWState] = {}
        self.base_lr: dict[str, float] = {}
        for group, spec in groups.items():
            self.groups[group] = dict(spec["params"])
            self.base_lr[group] = spec["lr"]
            self.states[group] = AdamWState(
                lr=spec["lr"], beta1=betas[0], beta2=betas[1], eps=eps,
                weight_decay=spec.get("weight_decay", 0.0),
            )
        logger.debug(f"AdamW over groups {', '.join(f'{g} (lr={lr})' for g, lr in self.base_lr.items())}")

    @property
    def step_count(self) -> int:
        return max((s.step for s in self.states.values()), default=0)

    def parameters(self) -> dict[str, Tensor]:
        return {name: t for group in self.groups.values() for name, t in group.items()}

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def set_lr(self, group: str, lr: float) -> None:
        self.states[group].lr = lr

    def step(self) -> None:
        for group, tensors in self.groups.items():
            adamw_step(
                self.states[group],
                {name: t.data for name, t in tensors.items()},
                {name: t.grad for name, t in tensors.items() if t.grad is not None},
            )

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Moments and step counters as flat named arrays, for checkpoints."""
        out = {}
        for group, state in self.states.items():
            out[f"{group}/step"] = np.array([float(state.step)])
            out[f"{group}/lr"] = np.array([state.lr])
            for name, m in state.m.items():
                out[f"{group}/m/{name}"] = m
            for name, v in state.v.items():
                out[f"{group}/v/{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for group, state in self.states.items():
            if f"{group}/step" not in arrays:
                raise OptimError(f"optimizer state has no entry for group {group!r}")
            state.step = int(arrays[f"{group}/step"][0])
            state.lr = float(arrays[f"{group}/lr"][0])
            for name, t in self.groups[group].items():
                for slot, table in (("m", state.m), ("v", state.v)):
                    key = f"{group}/{slot}/{name}"
                    if key in arrays:
                        if arrays[key].shape != t.shape:
                            raise OptimError(f"{key}: shape {arrays[key].shape} does not match {t.shape}")
                        table[name] = arrays[key].copy()

"""Parameter containers, SGD with momentum, and the cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from samil.diffcore.tensor import Tensor
from samil.errors import ContractError, DomainError, ShapeError


class ParameterSet:
    """Ordered mapping from parameter name to a leaf :class:`Tensor`."""

    def __init__(self, params=None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    @property
    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: t.grad for k, t in self._params.items()}

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state, strict=True):
        if strict and set(state) != set(self._params):
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            raise ContractError(f"state mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for k, v in state.items():
            if k not in self._params:
                continue
            t = self._params[k]
            v = np.asarray(v)
            if v.shape != t.shape:
                raise ShapeError(f"{k}: expected shape {t.shape}, got {v.shape}")
            t.data = v.astype(t.data.dtype, copy=True)

    def subset(self, prefixes) -> "ParameterSet":
        """A view sharing the tensors whose names start with any of ``prefixes``."""
        out = ParameterSet()
        for k, t in self._params.items():
            if any(k.startswith(p) for p in prefixes):
                out._params[k] = t
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: Tensor(t.data.copy()) for k, t in self._params.items()})


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise DomainError(f"learning rate must be non-negative, got {self.lr}")
        if self.weight_decay < 0:
            raise DomainError(f"weight decay must be non-negative, got {self.weight_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise DomainError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params: ParameterSet, opt: OptimizerState) -> ParameterSet:
    """One SGD update with coupled weight decay and heavy-ball momentum.

    ``v <- momentum * v + (g + weight_decay * theta)``, then
    ``theta <- theta - lr * v``. Gradients are cleared afterwards.
    """
    for name, t in params.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    for name, t in params.items():
        d = t.grad + opt.weight_decay * t.data if opt.weight_decay else t.grad
        v = opt.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        elif v.shape != t.shape:
            raise ShapeError(f"velocity for {name!r} has shape {v.shape}, parameter {t.shape}")
        v = opt.momentum * v + d
        opt.velocity[name] = v
        if opt.lr:
            t.data = t.data - opt.lr * v
        t.grad = None
    return params


def cosine_lr(step: int, total: int, base: float) -> float:
    """Half-cosine decay from ``base`` at step 0 to 0 at ``total``."""
    if total <= 0:
        raise DomainError(f"total must be positive, got {total}")
    if step < 0 or step > total:
        raise DomainError(f"step {step} outside [0, {total}]")
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))

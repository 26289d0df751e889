"""First-order optimizers over dicts of named float64 arrays."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError

__all__ = ["OptimizerState", "sgd_momentum", "adam", "optimizer_step"]


@dataclass
class OptimizerState:
    """Per-parameter slots plus hyperparameters.

    ``kind`` is ``"sgd-momentum"`` (slot ``v``) or ``"adam"`` (slots ``m``,
    ``v`` and a shared step count).
    """

    kind: str
    lr: float
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adam"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ContractError("learning rate must be positive")


def sgd_momentum(lr=0.01, momentum=0.9):
    return OptimizerState("sgd-momentum", lr=lr, momentum=momentum)


def adam(lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    return OptimizerState("adam", lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(state, params, grads):
    """Return updated parameters; ``state`` slots are advanced in place.

    SGD with momentum: ``v <- beta v + g``, ``p <- p - lr v``.
    Adam: bias-corrected first and second moments.
    Only names present in ``grads`` are updated.
    """
    state.step += 1
    out = dict(params)
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        p = np.asarray(params[name], dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ContractError(f"shape mismatch for {name!r}: {p.shape} vs {g.shape}")
        if state.kind == "sgd-momentum":
            v = state.slots.get(name)
            v = g.copy() if v is None else state.momentum * v + g
            state.slots[name] = v
            out[name] = p - state.lr * v
        else:
            m, v = state.slots.get(name, (np.zeros_like(p), np.zeros_like(p)))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.slots[name] = (m, v)
            m_hat = m / (1.0 - state.beta1 ** state.step)
            v_hat = v / (1.0 - state.beta2 ** state.step)
            out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out

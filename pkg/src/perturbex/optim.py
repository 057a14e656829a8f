from dataclasses import dataclass, field

import numpy as np

from perturbex.errors import DimensionError
from perturbex.resources import get_configuration_file


def _check_shapes(params: dict, grads: dict) -> None:
    if set(params) != set(grads):
        raise DimensionError(f"Parameter and gradient names differ: {sorted(set(params) ^ set(grads))}")
    for name, value in params.items():
        if value.shape != grads[name].shape:
            raise DimensionError(f"{name}: parameter shape {value.shape} vs gradient shape {grads[name].shape}")


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """Plain gradient descent ``theta <- theta - lr * g``, applied in place."""
    _check_shapes(params, grads)
    for name, value in params.items():
        value -= value.dtype.type(lr) * grads[name]
    return params


@dataclass
class AdamState:
    """
    Adam moments and step count.

    Attributes
    ----------
    lr : float
        Learning rate (0.05 for MNIST, 0.0005 for CIFAR-10 by default).
    beta1, beta2 : float
        Decay rates of the first and second moment averages (0.50 and 0.999).
    eps : float
        Denominator smoothing term.
    step : int
        Number of updates applied so far.
    m, v : dict
        First and second moments by parameter name, zero until first seen.
    """

    lr: float
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def with_defaults(cls, lr: float) -> "AdamState":
        adam = get_configuration_file()["adam"]
        return cls(lr=lr, beta1=adam["beta1"], beta2=adam["beta2"], eps=adam["eps"])

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """
    One bias-corrected Adam update, applied to ``params`` in place.

    m <- b1 m + (1 - b1) g, v <- b2 v + (1 - b2) g^2,
    theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """
    _check_shapes(params, grads)
    state.step += 1
    t = state.step
    correction1 = 1 - state.beta1**t
    correction2 = 1 - state.beta2**t

    for name, value in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(value))
        v = state.v.setdefault(name, np.zeros_like(value))
        if m.shape != value.shape:
            raise DimensionError(f"{name}: optimizer state shape {m.shape} vs parameter shape {value.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        value -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(value.dtype)
    return params

"""First-order optimizers over flat parameter vectors and target tracking."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, NonFiniteError


def _check(params: np.ndarray, grad: np.ndarray, name: str) -> None:
    if params.shape != grad.shape:
        raise ConfigurationError(f"{name}: gradient shape {grad.shape} != params {params.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.count_nonzero(~np.isfinite(grad)))
        raise NonFiniteError(
            f"{name}: non-finite gradient",
            {"n_bad": bad, "size": grad.size, "param_norm": float(np.linalg.norm(params))},
        )


class Adam:
    """Adaptive-moment descent. Updates ``params`` in place and returns it."""

    def __init__(self, n_params: int, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, name: str = "adam") -> None:
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.name = name

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        _check(params, grad, self.name)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * grad * grad
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m.copy(), "v": self.v.copy(), "lr": self.lr}


class SGD:
    def __init__(self, n_params: int, lr: float = 1e-3, name: str = "sgd") -> None:
        self.lr = lr
        self.t = 0
        self.name = name

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        _check(params, grad, self.name)
        self.t += 1
        params -= self.lr * grad
        return params


def optimizer_step(opt, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    return opt.step(params, gradient)


def soft_update(target: np.ndarray, online: np.ndarray, tau: float) -> np.ndarray:
    """``target <- tau * online + (1 - tau) * target`` in place."""
    if not 0.0 < tau <= 1.0:
        raise ConfigurationError(f"tau must lie in (0, 1], got {tau}")
    if target.shape != online.shape:
        raise ConfigurationError(f"shape mismatch {target.shape} vs {online.shape}")
    target *= 1.0 - tau
    target += tau * online
    return target

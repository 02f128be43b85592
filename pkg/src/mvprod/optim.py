"""Adam with decoupled weight decay, cosine LR schedule, gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import NonFiniteError, ShapeMismatchError, Tensor, backward, zero_grads


@dataclass
class AdamState:
    """Per-parameter moment estimates and step counter."""

    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(
            exp_avg=np.zeros_like(param),
            exp_avg_sq=np.zeros_like(param),
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> np.ndarray:
    """One Adam update with bias correction and decoupled weight decay.

    The weight decay shrinks the parameter by (1 - lr * wd) before the
    Adam delta is applied; moments are updated even at lr == 0.
    Returns the new parameter array; `state` is mutated in place.
    """
    if param.shape != grad.shape:
        raise ShapeMismatchError(f"adam_step: param {param.shape} vs grad {grad.shape}")
    if lr < 0:
        raise ValueError(f"adam_step: negative learning rate {lr}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("adam_step: non-finite gradient")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.exp_avg *= b1
    state.exp_avg += (1.0 - b1) * grad
    state.exp_avg_sq *= b2
    state.exp_avg_sq += (1.0 - b2) * grad * grad

    m_hat = state.exp_avg / (1.0 - b1**state.step)
    v_hat = state.exp_avg_sq / (1.0 - b2**state.step)

    new = param * param.dtype.type(1.0 - lr * weight_decay)
    new = new - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
    return new


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        raise ValueError("cosine_lr: total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(loss_fn, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences.

    `loss_fn` must rebuild and return the scalar loss from the current
    parameter values on every call; run it at float64 only, float32
    differences are too noisy for meaningful tolerances.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("grad_check requires float64 parameters")

    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * eps)
        worst = max(worst, max_relative_error(ag.reshape(-1), numeric))
    return worst

"""Core differentiable scalar/tensor math and the finite-difference gradient harness.

All public functions accept and return torch tensors in float64 (numpy inputs
are converted). Gradients flow through every operation; `grad_check` is the
independent oracle used by the test suite against every energy and the full
generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import InvalidArgumentError

DTYPE = torch.float64

Array = np.ndarray


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    """Convert array-likes to a float64 tensor (no copy if already one)."""
    if isinstance(x, torch.Tensor):
        t = x.to(DTYPE)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise InvalidArgumentError(f"{what} contains non-finite entries")


def skew(w: torch.Tensor) -> torch.Tensor:
    """Cross-product matrix [w]x for w of shape (..., 3)."""
    zero = torch.zeros_like(w[..., 0])
    rows = [
        torch.stack([zero, -w[..., 2], w[..., 1]], dim=-1),
        torch.stack([w[..., 2], zero, -w[..., 0]], dim=-1),
        torch.stack([-w[..., 1], w[..., 0], zero], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def rodrigues(axis_angle) -> torch.Tensor:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Below ||w|| = 1e-8 the first-order branch I + [w]x is used so the
    normalization never divides by a vanishing angle.
    """
    w = as_tensor(axis_angle)
    if w.shape[-1] != 3:
        raise InvalidArgumentError(f"axis-angle must have last dimension 3, got {tuple(w.shape)}")
    _check_finite(w, "axis-angle")

    theta_sq = (w * w).sum(dim=-1)
    small = theta_sq < 1e-16
    # Guard the unselected branch so sqrt/division never see zero.
    theta = torch.where(small, torch.ones_like(theta_sq), theta_sq).sqrt()
    axis = w / theta[..., None]
    k = skew(axis)
    eye = torch.eye(3, dtype=w.dtype).expand(*w.shape[:-1], 3, 3)
    s = torch.sin(theta)[..., None, None]
    c = torch.cos(theta)[..., None, None]
    full = eye + s * k + (1.0 - c) * (k @ k)
    taylor = eye + skew(w)
    return torch.where(small[..., None, None], taylor, full)


def softmax(logits, dim: int = -1) -> torch.Tensor:
    """Numerically stable softmax (max subtraction) along `dim`."""
    x = as_tensor(logits)
    if x.numel() == 0:
        raise InvalidArgumentError("softmax of an empty vector is undefined")
    _check_finite(x, "logits")
    shifted = x - x.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def softplus(x) -> torch.Tensor:
    """log(1 + exp(x)) in the overflow-safe form max(x, 0) + log1p(exp(-|x|))."""
    t = as_tensor(x)
    _check_finite(t, "softplus input")
    return t.clamp(min=0.0) + torch.log1p(torch.exp(-t.abs()))


def huber(x, delta: float) -> torch.Tensor:
    """Huber penalty: x^2/2 inside |x| <= delta, delta*(|x| - delta/2) outside."""
    if not (float(delta) > 0.0):
        raise InvalidArgumentError(f"huber delta must be positive, got {delta}")
    t = as_tensor(x)
    a = t.abs()
    return torch.where(a <= delta, 0.5 * t * t, delta * (a - 0.5 * delta))


@dataclass
class DifferentiableFunction:
    """A scalar function of a flat parameter vector together with its gradient."""

    evaluate: Callable[[Array], float]
    gradient: Callable[[Array], Array]
    dim: int
    name: str = ""


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    analytic_at_worst: float
    numeric_at_worst: float


def from_torch(fn: Callable[[torch.Tensor], torch.Tensor], dim: int, name: str = "") -> DifferentiableFunction:
    """Wrap a torch scalar function of a flat f64 vector as a DifferentiableFunction."""

    def evaluate(x: Array) -> float:
        return float(fn(as_tensor(x)))

    def gradient(x: Array) -> Array:
        t = as_tensor(x, requires_grad=True)
        value = fn(t)
        (grad,) = torch.autograd.grad(value, t)
        return grad.detach().numpy()

    return DifferentiableFunction(evaluate=evaluate, gradient=gradient, dim=dim, name=name)


def grad_check(f: DifferentiableFunction, x, step: float = 1e-5) -> GradCheckReport:
    """Compare f.gradient against central finite differences of f.evaluate.

    Relative error per coordinate uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not (step > 0):
        raise InvalidArgumentError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(f.gradient(x), dtype=np.float64)
    if analytic.shape != x.shape:
        raise InvalidArgumentError(
            f"gradient shape {analytic.shape} does not match parameter shape {x.shape}"
        )
    numeric = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        numeric.flat[i] = (f.evaluate(xp) - f.evaluate(xm)) / (2.0 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_error=float(rel.flat[worst]),
        worst_index=worst,
        analytic_at_worst=float(analytic.flat[worst]),
        numeric_at_worst=float(numeric.flat[worst]),
    )

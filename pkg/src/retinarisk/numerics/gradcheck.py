"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor


class GradCheckError(ValueError):
    pass


def _scalar(out: Tensor) -> float:
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise GradCheckError("grad_check needs a function returning a scalar Tensor")
    return float(out.data)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6,
                   noise: float = 0.0) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; differences below ``noise`` count as zero."""
    diff = np.abs(analytic - numeric)
    diff = np.where(diff <= noise, 0.0, diff)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return diff / denom


def _roundoff(value: float, eps: float) -> float:
    # cancellation error bound of a central difference at this function scale
    return 8.0 * np.finfo(np.float64).eps * max(abs(value), 1.0) / eps


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
               floor: float = 1e-6) -> float:
    """Max element-wise relative error between backprop and central differences."""
    if not 1e-7 <= eps <= 1e-3:
        raise GradCheckError(f"eps {eps} outside [1e-7, 1e-3]")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    noise = _roundoff(_scalar(out), eps)
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _scalar(f(x))
        flat[i] = orig - eps
        lo = _scalar(f(x))
        flat[i] = orig
        numeric.reshape(-1)[i] = (hi - lo) / (2.0 * eps)
    return float(relative_error(analytic, numeric, floor, noise).max())


def grad_check_params(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-6, per_tensor: int | None = None,
                      rng: np.random.Generator | None = None,
                      floor: float = 1e-6) -> dict[str, float]:
    """Check d(loss)/d(param) for every named parameter.

    With ``per_tensor`` set, at most that many coordinates per tensor are
    probed (chosen by ``rng``); otherwise every coordinate is. Returns the
    max relative error per parameter name.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise GradCheckError(f"eps {eps} outside [1e-7, 1e-3]")
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = loss_fn()
    noise = _roundoff(_scalar(loss), eps)
    loss.backward()
    report: dict[str, float] = {}
    for name, p in params.items():
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        if per_tensor is None or per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, size=per_tensor, replace=False)
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _scalar(loss_fn())
            flat[i] = orig - eps
            lo = _scalar(loss_fn())
            flat[i] = orig
            numeric[j] = (hi - lo) / (2.0 * eps)
        report[name] = float(relative_error(analytic[idx], numeric, floor, noise).max())
    return report


def directional_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-6, rng: np.random.Generator | None = None) -> float:
    """Relative error of the gradient projected on one random unit direction
    spanning all parameters at once."""
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = loss_fn()
    noise = _roundoff(_scalar(loss), eps)
    loss.backward()
    dirs = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    norm = np.sqrt(sum(float((d * d).sum()) for d in dirs.values()))
    dirs = {k: d / norm for k, d in dirs.items()}
    analytic = sum(float(((p.grad if p.grad is not None else 0.0) * dirs[k]).sum())
                   for k, p in params.items())
    originals = {k: p.data.copy() for k, p in params.items()}

    def shifted(step: float) -> float:
        for k, p in params.items():
            p.data[...] = originals[k] + step * dirs[k]
        return _scalar(loss_fn())

    hi, lo = shifted(eps), shifted(-eps)
    for k, p in params.items():
        p.data[...] = originals[k]
    numeric = (hi - lo) / (2.0 * eps)
    return float(relative_error(np.array(analytic), np.array(numeric), noise=noise).max())

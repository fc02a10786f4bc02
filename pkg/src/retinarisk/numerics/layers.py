"""Layer primitives built on :class:`Tensor`."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .tensor import DimensionError, Tensor, as_tensor


class ConfigurationError(ValueError):
    """A layer or model was configured with inconsistent hyperparameters."""


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    out = x @ weight
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} vs output width {weight.shape[1]}")
        out = out + bias
    return out


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((logits, out * (g - dot)),)

    return Tensor._make(out, (logits,), bw)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def bw(g):
        return ((logits, g - probs * g.sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (logits,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * ((var + eps) ** -0.5) * gamma + beta


def dropout(x: Tensor, rate: float, mode: Literal["train", "eval", "mc"],
            rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. ``eval`` returns ``x`` itself."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("stochastic dropout needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    return x * (keep / (1.0 - rate)).astype(x.data.dtype)


@dataclass
class AttentionParams:
    """Projection weights of one multi-head attention block (all ``Dm x Dm``)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return dict(wq=self.wq, bq=self.bq, wk=self.wk, bk=self.bk,
                    wv=self.wv, bv=self.bv, wo=self.wo, bo=self.bo)

    @classmethod
    def identity(cls, dim: int) -> "AttentionParams":
        eye, zero = np.eye(dim), np.zeros(dim)
        return cls(*(Tensor(a.copy()) for a in (eye, zero) * 4))


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         params: AttentionParams, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` heads.

    Inputs are ``[..., N, Dm]``; leading batch axes broadcast. Returns the
    projected output ``[..., Nq, Dm]`` and, if asked, the attention weights
    ``[..., heads, Nq, Nk]``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    dm = q.shape[-1]
    if heads < 1 or dm % heads:
        raise ConfigurationError(f"model width {dm} not divisible by {heads} heads")
    if k.shape[-1] != dm or v.shape[-1] != dm:
        raise DimensionError("query/key/value widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("keys and values must have the same length")
    dh = dm // heads
    p = params
    qp = linear_forward(q, p.wq, p.bq)
    kp = linear_forward(k, p.wk, p.bk)
    vp = linear_forward(v, p.wv, p.bv)

    def split(t: Tensor) -> Tensor:
        lead = t.shape[:-2]
        n = t.shape[-2]
        t = t.reshape(lead + (n, heads, dh))
        nd = t.ndim
        return t.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    qh, kh, vh = split(qp), split(kp), split(vp)
    nd = kh.ndim
    scores = (qh @ kh.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2))) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    ctx = weights @ vh
    nd = ctx.ndim
    ctx = ctx.transpose(tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    ctx = ctx.reshape(ctx.shape[:-2] + (dm,))
    out = linear_forward(ctx, p.wo, p.bo)
    if return_weights:
        return out, weights
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           pad: int = 1) -> Tensor:
    """2-d convolution on channel-last input.

    ``x`` is ``[B, H, W, Cin]``, ``weight`` is ``[k, k, Cin, Cout]``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects [B,H,W,C], got {x.shape}")
    k, k2, cin, cout = weight.shape
    if k != k2 or cin != x.shape[-1]:
        raise DimensionError(f"conv2d: weight {weight.shape} vs input {x.shape}")
    b, h, w, _ = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    # patches: [B, oh, ow, k, k, Cin]
    patches = np.empty((b, oh, ow, k, k, cin), dtype=x.data.dtype)
    for i in range(k):
        for j in range(k):
            patches[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    flat = patches.reshape(b * oh * ow, k * k * cin)
    wmat = weight.data.reshape(k * k * cin, cout)
    out = (flat @ wmat).reshape(b, oh, ow, cout)
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = parents + (bias,)

    def bw(g):
        g2 = g.reshape(b * oh * ow, cout)
        grads = []
        if x.requires_grad:
            gpatch = (g2 @ wmat.T).reshape(b, oh, ow, k, k, cin)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += gpatch[:, :, :, i, j, :]
            grads.append((x, gxp[:, pad:pad + h, pad:pad + w, :]))
        if weight.requires_grad:
            grads.append((weight, (flat.T @ g2).reshape(weight.shape)))
        if bias is not None and bias.requires_grad:
            grads.append((bias, g2.sum(axis=0)))
        return grads

    return Tensor._make(out, parents, bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling on ``[B, H, W, C]``.

    Trailing rows/columns that do not fill a window are dropped. The
    gradient goes to the first maximal element of each window.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"max_pool2d expects [B,H,W,C], got {x.shape}")
    b, h, w, c = x.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise DimensionError(f"pool window {size} larger than input {h}x{w}")
    windows = (x.data[:, :oh * size, :ow * size, :]
               .reshape(b, oh, size, ow, size, c).transpose(0, 1, 3, 5, 2, 4)
               .reshape(b, oh, ow, c, size * size))
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :oh * size, :ow * size, :] = (gw.reshape(b, oh, ow, c, size, size)
                                            .transpose(0, 1, 4, 2, 5, 3)
                                            .reshape(b, oh * size, ow * size, c))
        return ((x, gx),)

    return Tensor._make(out, (x,), bw)

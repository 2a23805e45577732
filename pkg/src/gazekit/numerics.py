"""Differentiable numerics for the gaze network.

Every layer is a pair of plain functions: ``*_forward`` returns
``(out, cache)`` and ``*_backward`` consumes the upstream gradient plus that
cache. Arrays are NHWC numpy arrays. Ops preserve the input dtype, so the
training path runs in float32 while the finite-difference checker can feed
float64 through the very same code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericFault, ShapeMismatch, ZeroBatch

DTYPE = np.float32


def check_finite(arr, where, step=None):
    if not np.all(np.isfinite(arr)):
        raise NumericFault(f"non-finite values in {where}", step=step)
    return arr


# ----------------------------------------------------------------------------
# convolution


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d_forward(x, w, b, stride=1, padding="same"):
    """Cross-correlation of ``x`` (N,H,W,Cin) with ``w`` (kh,kw,Cin,Cout)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-d input and weights, got {x.shape} / {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin:
        raise ShapeMismatch(f"conv2d: input has {x.shape[3]} channels, weights expect {cin}")
    if b.shape != (cout,):
        raise ShapeMismatch(f"conv2d: bias shape {b.shape} != ({cout},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeMismatch(f"conv2d: kernel dims must be odd, got {kh}x{kw}")
    n, h, wd, _ = x.shape
    if padding == "same":
        pt, pb = _same_pads(h, kh, stride)
        pl, pr = _same_pads(wd, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        if h < kh or wd < kw:
            raise ShapeMismatch(f"conv2d valid: input {h}x{wd} smaller than kernel {kh}x{kw}")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # (N,Ho,Wo,C,kh,kw) -> rows ordered (kh,kw,C) to match the weight layout
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols @ w.reshape(kh * kw * cin, cout) + b
    out = out.reshape(n, ho, wo, cout)
    check_finite(out, "conv2d")
    cache = (cols, w, xp.shape, (pt, pb, pl, pr), stride, x.shape)
    return out, cache


def conv2d_backward(dout, cache):
    cols, w, xp_shape, (pt, pb, pl, pr), stride, x_shape = cache
    kh, kw, cin, cout = w.shape
    n, ho, wo, _ = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    h, wd = x_shape[1], x_shape[2]
    dx = dxp[:, pt:pt + h, pl:pl + wd, :]
    return dx, dw, db


# ----------------------------------------------------------------------------
# pooling


def pool2d_forward(x, kind="avg", size=2, stride=2):
    n, h, wd, c = x.shape
    if h < size or wd < size:
        raise ShapeMismatch(f"pool2d: spatial dims {h}x{wd} smaller than window {size}")
    ho = (h - size) // stride + 1
    wo = (wd - size) // stride + 1
    win = sliding_window_view(x, (size, size), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(n, ho, wo, c, size * size)
    if kind == "avg":
        out = flat.mean(axis=-1)
        arg = None
    elif kind == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    else:
        raise ValueError(f"unknown pooling kind {kind!r}")
    return out, (kind, size, stride, x.shape, arg)


def pool2d_backward(dout, cache):
    kind, size, stride, x_shape, arg = cache
    _, ho, wo, _ = dout.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for k in range(size * size):
        i, j = divmod(k, size)
        if kind == "avg":
            contrib = dout / (size * size)
        else:
            contrib = dout * (arg == k)
        dx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += contrib
    return dx


def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to(dout[:, None, None, :] / (h * w), x_shape).copy()


# ----------------------------------------------------------------------------
# batch norm (channel-last, any rank >= 2)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, eps=1e-3,
                      momentum=0.9, mode="train"):
    """Normalize over every axis but the last.

    In train mode ``running_mean`` / ``running_var`` are updated in place with
    ``running = momentum * running + (1 - momentum) * batch``. The batch
    variance is the biased (population) estimate in both places.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm: gamma/beta must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ZeroBatch(f"batchnorm in train mode needs batch >= 2, got {x.shape[0]}")
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif mode == "infer":
        mu = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    check_finite(out, "batchnorm")
    return out, (xhat, inv_std, gamma, mode, axes)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, mode, axes = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    m = xhat.size // xhat.shape[-1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


# ----------------------------------------------------------------------------
# dense layers and activations


def fully_connected_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"fully_connected: input {x.shape}, weights {w.shape}, bias {b.shape}")
    out = x @ w + b
    check_finite(out, "fully_connected")
    return out, (x, w)


def fully_connected_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def mse_loss(pred, target):
    """Mean over all components of the squared difference, with its gradient."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse_loss: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype, copy=False)


# ----------------------------------------------------------------------------
# parameters and Adam


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        shapes = {self.value.shape, self.grad.shape, self.adam_m.shape, self.adam_v.shape}
        if len(shapes) != 1:
            raise ShapeMismatch(f"parameter tensors disagree in shape: {shapes}")

    def zero_grad(self):
        self.grad[...] = 0


def adam_step(params, lr, t, beta1=0.9, beta2=0.999, eps=1e-7):
    """Bias-corrected Adam update, in place. ``t`` is the 1-based step."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    for p in params:
        check_finite(p.grad, "gradient", step=t)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        mhat = p.adam_m / c1
        vhat = p.adam_v / c2
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype, copy=False)


# ----------------------------------------------------------------------------
# learning-rate schedules


@dataclass
class LrSchedule:
    kind: str = "exponential_staircase"
    initial_lr: float = 0.016
    decay_steps: int = 8000
    decay_rate: float = 0.64
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    plateau_min_lr: float = 0.0
    # runtime state of the plateau variant
    current_lr: float = field(default=None)
    best_signal: float = field(default=math.inf)
    bad_evals: int = field(default=0)

    def __post_init__(self):
        if self.kind not in ("exponential_staircase", "reduce_on_plateau", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if not 0 < self.decay_rate < 1:
            raise ValueError("decay_rate must lie in (0, 1)")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.current_lr is None:
            self.current_lr = self.initial_lr

    def settings(self):
        return {
            "kind": self.kind,
            "initial_lr": self.initial_lr,
            "decay_steps": self.decay_steps,
            "decay_rate": self.decay_rate,
            "plateau_patience": self.plateau_patience,
            "plateau_factor": self.plateau_factor,
            "plateau_min_lr": self.plateau_min_lr,
        }

    def state(self):
        return {"current_lr": self.current_lr, "best_signal": self.best_signal,
                "bad_evals": self.bad_evals}


def lr_at(schedule, step, plateau_signal=None):
    """Learning rate for ``step``.

    For ``reduce_on_plateau`` a non-None ``plateau_signal`` is one evaluation
    of the monitored metric and advances the schedule's state.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.kind == "constant":
        return schedule.initial_lr
    if schedule.kind == "exponential_staircase":
        return schedule.initial_lr * schedule.decay_rate ** (step // schedule.decay_steps)
    if plateau_signal is not None:
        if plateau_signal < schedule.best_signal:
            schedule.best_signal = float(plateau_signal)
            schedule.bad_evals = 0
        else:
            schedule.bad_evals += 1
            if schedule.bad_evals >= schedule.plateau_patience:
                schedule.current_lr = max(schedule.current_lr * schedule.plateau_factor,
                                          schedule.plateau_min_lr)
                schedule.bad_evals = 0
    return schedule.current_lr


# ----------------------------------------------------------------------------
# finite-difference oracle


def numeric_grad(f, x, h=1e-3, indices=None, signature=None):
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place).

    Accumulates in float64. ``indices`` restricts the check to a subset of flat
    positions; the result holds NaN elsewhere. If ``signature`` is given it is
    called after every evaluation of ``f`` and must return the activation
    pattern (relu masks, pooling argmaxes) of that evaluation; components whose
    +h or -h evaluation changes the pattern straddle a kink, where a central
    difference is no oracle, and are left NaN.
    """
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan, dtype=np.float64)
    idx = range(flat.size) if indices is None else indices
    base = None
    if signature is not None:
        f()
        base = signature()
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        kinked = base is not None and not np.array_equal(signature(), base)
        flat[i] = orig - h
        fm = float(f())
        kinked = kinked or (base is not None and not np.array_equal(signature(), base))
        flat[i] = orig
        if not kinked:
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic, numeric, floor=1e-6):
    """Per-component ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)

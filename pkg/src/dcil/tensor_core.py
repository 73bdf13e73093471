"""
Differentiable primitives with explicit analytic backward passes.

Tensors are plain ``numpy.ndarray`` objects. Every primitive is split into a
``*_forward`` function that returns ``(output, ctx)`` and a ``*_backward``
function that consumes that ``ctx`` exactly once. There is no tape: networks
in this package have a static topology and call the pairs directly.

Set the environment variable ``DCIL_DEBUG=1`` to assert finiteness of every
forward output and backward gradient.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, NumericalError, ShapeError

DEBUG = os.environ.get("DCIL_DEBUG", "") not in ("", "0")

TRAIN = "train"
EVAL = "eval"


class Context:
    """Cached forward state for one primitive call; consumable once."""

    __slots__ = ("op", "saved", "_consumed")

    def __init__(self, op: str, **saved):
        self.op = op
        self.saved = saved
        self._consumed = False

    def consume(self, op: str) -> dict:
        if self.op != op:
            raise ContractError(f"{op}_backward given a context from {self.op}_forward")
        if self._consumed:
            raise ContractError(f"{op}_backward called twice on the same forward context")
        self._consumed = True
        saved = self.saved
        self.saved = {}
        return saved


def _check(name: str, *arrays: np.ndarray) -> None:
    if not DEBUG:
        return
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericalError(f"non-finite values produced by {name}")


# --------------------------------------------------------------------------- linear

def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
    out = x @ weight.T
    if bias is not None:
        out += bias
    _check("linear_forward", out)
    return out, Context("linear", x=x, weight=weight, has_bias=bias is not None)


def linear_backward(ctx: Context, grad_out: np.ndarray):
    s = ctx.consume("linear")
    x, weight = s["x"], s["weight"]
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"linear_backward: grad_out {grad_out.shape} expected {(x.shape[0], weight.shape[0])}")
    grad_in = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0) if s["has_bias"] else None
    _check("linear_backward", grad_in, grad_w, grad_b)
    return grad_in, grad_w, grad_b


# --------------------------------------------------------------------------- conv2d

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                   stride: int = 1, pad: int = 0):
    """Cross-correlation of ``x`` (B, C, H, W) with ``weight`` (F, C, K, K) via im2col."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} filters")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    B, C, H, W = x.shape
    F, _, KH, KW = weight.shape
    Ho = conv_output_size(H, KH, stride, pad)
    Wo = conv_output_size(W, KW, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ConfigError(f"conv2d: nonpositive output size {Ho}x{Wo} for input {H}x{W}, kernel {KH}x{KW}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # cols: (B, C*KH*KW, Ho*Wo) so the product lands directly in NCHW order
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * KH * KW, Ho * Wo)
    out = np.matmul(weight.reshape(F, -1), cols).reshape(B, F, Ho, Wo)
    if bias is not None:
        out += bias.reshape(1, F, 1, 1)
    _check("conv2d_forward", out)
    ctx = Context("conv2d", cols=cols, weight=weight, x_shape=x.shape, stride=stride, pad=pad,
                  has_bias=bias is not None)
    return out, ctx


def conv2d_backward(ctx: Context, grad_out: np.ndarray, need_input_grad: bool = True):
    s = ctx.consume("conv2d")
    cols, weight = s["cols"], s["weight"]
    B, C, H, W = s["x_shape"]
    stride, pad = s["stride"], s["pad"]
    F, _, KH, KW = weight.shape
    Ho = conv_output_size(H, KH, stride, pad)
    Wo = conv_output_size(W, KW, stride, pad)
    if grad_out.shape != (B, F, Ho, Wo):
        raise ShapeError(f"conv2d_backward: grad_out {grad_out.shape} expected {(B, F, Ho, Wo)}")
    g = grad_out.reshape(B, F, Ho * Wo)
    grad_w = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 2)) if s["has_bias"] else None
    grad_in = None
    if need_input_grad:
        dcols = np.matmul(weight.reshape(F, -1).T, g).reshape(B, C, KH, KW, Ho, Wo)
        dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=grad_out.dtype)
        for i in range(KH):
            for j in range(KW):
                dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
        grad_in = np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W]) if pad else dxp
    _check("conv2d_backward", grad_in, grad_w, grad_b)
    return grad_in, grad_w, grad_b


# --------------------------------------------------------------------------- batchnorm

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def init(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")


def batchnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, running: RunningStats,
                      mode: str = TRAIN, momentum: float = 0.1, eps: float = 1e-5):
    """Normalize over every axis but the channel axis (1).

    In train mode the batch statistics are used and ``running`` is updated in
    place with ``running = (1 - momentum) * running + momentum * batch``; the
    running variance tracks the unbiased batch variance.
    """
    axes, bshape = _bn_axes(x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: {C} channels but gamma {gamma.shape}, beta {beta.shape}")
    if mode == TRAIN:
        count = x.size // C
        if count < 2:
            raise ShapeError("batchnorm: train mode needs more than one value per channel")
        mean = x.mean(axis=axes)
        xc = x - mean.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        running.mean *= 1.0 - momentum
        running.mean += momentum * mean
        running.var *= 1.0 - momentum
        running.var += momentum * var * (count / (count - 1))
    elif mode == EVAL:
        mean, var = running.mean, running.var
        xc = x - mean.reshape(bshape)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std.reshape(bshape)
    out = xhat * gamma.reshape(bshape) + beta.reshape(bshape)
    _check("batchnorm_forward", out)
    ctx = Context("batchnorm", xhat=xhat, inv_std=inv_std, gamma=gamma, mode=mode)
    return out, ctx


def batchnorm_backward(ctx: Context, grad_out: np.ndarray):
    s = ctx.consume("batchnorm")
    xhat, inv_std, gamma = s["xhat"], s["inv_std"], s["gamma"]
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"batchnorm_backward: grad_out {grad_out.shape} expected {xhat.shape}")
    axes, bshape = _bn_axes(grad_out)
    grad_beta = grad_out.sum(axis=axes)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    gxhat = grad_out * gamma.reshape(bshape)
    if s["mode"] == TRAIN:
        n = grad_out.size // grad_out.shape[1]
        grad_in = (inv_std.reshape(bshape) / n) * (
            n * gxhat
            - gxhat.sum(axis=axes).reshape(bshape)
            - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
        )
    else:
        grad_in = gxhat * inv_std.reshape(bshape)
    _check("batchnorm_backward", grad_in, grad_gamma, grad_beta)
    return grad_in, grad_gamma, grad_beta


# --------------------------------------------------------------------------- elementwise / pooling

def relu_forward(x: np.ndarray):
    positive = x > 0
    return x * positive, Context("relu", positive=positive)


def relu_backward(ctx: Context, grad_out: np.ndarray) -> np.ndarray:
    s = ctx.consume("relu")
    return grad_out * s["positive"]


def avgpool2d_forward(x: np.ndarray, kernel: int):
    """Non-overlapping average pooling (stride == kernel); trailing rows/cols are dropped."""
    if x.ndim != 4:
        raise ShapeError(f"avgpool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // kernel, W // kernel
    if kernel < 1 or Ho < 1 or Wo < 1:
        raise ConfigError(f"avgpool2d: kernel {kernel} too large for {H}x{W}")
    xv = x[:, :, :Ho * kernel, :Wo * kernel].reshape(B, C, Ho, kernel, Wo, kernel)
    out = xv.mean(axis=(3, 5))
    return out, Context("avgpool2d", x_shape=x.shape, kernel=kernel)


def avgpool2d_backward(ctx: Context, grad_out: np.ndarray) -> np.ndarray:
    s = ctx.consume("avgpool2d")
    B, C, H, W = s["x_shape"]
    k = s["kernel"]
    Ho, Wo = grad_out.shape[2], grad_out.shape[3]
    g = np.repeat(np.repeat(grad_out, k, axis=2), k, axis=3) / (k * k)
    if Ho * k == H and Wo * k == W:
        return g
    grad_in = np.zeros((B, C, H, W), dtype=grad_out.dtype)
    grad_in[:, :, :Ho * k, :Wo * k] = g
    return grad_in


def flatten_forward(x: np.ndarray):
    return x.reshape(x.shape[0], -1), Context("flatten", x_shape=x.shape)


def flatten_backward(ctx: Context, grad_out: np.ndarray) -> np.ndarray:
    return grad_out.reshape(ctx.consume("flatten")["x_shape"])


# --------------------------------------------------------------------------- losses

def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient wrt ``logits``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels {labels.shape} do not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    logp = log_softmax(logits)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= B
    return float(loss), grad


def kd_kl_loss(teacher_logits: np.ndarray, student_logits: np.ndarray, temperature: float,
               teacher_grad: bool = False):
    """``T**2 * mean_b KL(softmax(teacher/T) || softmax(student/T))``.

    Returns ``(loss, grad_student)`` and, when ``teacher_grad`` is set, also the
    gradient wrt the teacher logits as a third element.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if teacher_logits.shape != student_logits.shape or teacher_logits.ndim != 2:
        raise ShapeError(f"kd: teacher {teacher_logits.shape} vs student {student_logits.shape}")
    T = temperature
    B = teacher_logits.shape[0]
    logp = log_softmax(teacher_logits / T)
    logq = log_softmax(student_logits / T)
    p = np.exp(logp)
    diff = logp - logq
    kl_rows = (p * diff).sum(axis=1)
    loss = T * T * kl_rows.mean()
    grad_student = (T / B) * (np.exp(logq) - p)
    if not teacher_grad:
        return float(loss), grad_student
    grad_teacher = (T / B) * p * (diff - kl_rows[:, None])
    return float(loss), grad_student, grad_teacher


# --------------------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict[str, float]

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` wrt ``x``, perturbing ``x`` in place."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def grad_check(forward: Callable[..., np.ndarray], backward: Callable[[np.ndarray], Sequence[np.ndarray]],
               inputs: dict[str, np.ndarray], rng: np.random.Generator, h: float = 1e-5) -> GradCheckReport:
    """Compare analytic and central-difference gradients of a primitive.

    ``forward(**inputs)`` returns the output tensor; ``backward(grad_out)``
    returns gradients in the order of ``inputs``. The scalar probed is
    ``sum(forward(...) * R)`` for a fixed random projection ``R``.
    """
    out = forward(**inputs)
    proj = rng.standard_normal(out.shape)
    analytic = backward(proj)

    def scalar() -> float:
        return float((forward(**inputs) * proj).sum())

    per_input = {}
    for (name, x), ga in zip(inputs.items(), analytic):
        if ga is None:
            continue
        per_input[name] = relative_error(ga, numerical_gradient(scalar, x, h))
    return GradCheckReport(max(per_input.values()), per_input)

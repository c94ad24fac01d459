"""Forward/backward kernels for the layer types used by the cover networks.

Tensors are plain ``numpy.ndarray`` objects. Images are batch-first NHWC
(batch x height x width x channels), vectors are batch x features.

Every kernel comes as a ``*_forward`` function returning ``(out, cache)``
and a ``*_backward`` function taking the upstream gradient and that
cache. The short names (``conv2d``, ``maxpool2d``, ...) return only the
forward output.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParameterError, LabelError, NumericalError, ShapeError

__all__ = [
    "ConvParams",
    "LrnParams",
    "get_dtype",
    "float64_mode",
    "debug_mode",
    "conv2d",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool2d",
    "maxpool2d_forward",
    "maxpool2d_backward",
    "relu",
    "relu_forward",
    "relu_backward",
    "lrn",
    "lrn_forward",
    "lrn_backward",
    "linear",
    "linear_forward",
    "linear_backward",
    "dropout",
    "dropout_forward",
    "dropout_backward",
    "softmax",
    "softmax_xent",
    "softmax_xent_backward",
]

MAX_RANK = 4


class _Precision(threading.local):
    dtype = np.float32
    debug = False


_precision = _Precision()


def get_dtype():
    """Floating dtype used for freshly created parameters and inputs."""
    return _precision.dtype


@contextlib.contextmanager
def float64_mode():
    """Switch parameter/input creation to float64 (gradient checking only)."""
    prev = _precision.dtype
    _precision.dtype = np.float64
    try:
        yield
    finally:
        _precision.dtype = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every kernel output for NaN/Inf while active."""
    prev = _precision.debug
    _precision.debug = enabled
    try:
        yield
    finally:
        _precision.debug = prev


def _checked(name, *arrays):
    if _precision.debug:
        for a in arrays:
            if a is not None and not np.all(np.isfinite(a)):
                raise NumericalError(f"{name}: non-finite values in output")
    return arrays[0] if len(arrays) == 1 else arrays


def _require_rank(x, rank, what):
    if x.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {x.shape}", axis="rank")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvParams:
    """Filter bank (out x kh x kw x in_per_group) plus bias and geometry."""

    filters: np.ndarray
    bias: np.ndarray
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.filters.ndim != 4:
            raise ShapeError(f"filters must be rank 4, got {self.filters.shape}", axis="rank")
        out_ch, kh, kw, _ = self.filters.shape
        if kh == 0 or kw == 0:
            raise InvalidParameterError("convolution window has zero size")
        if self.stride_h < 1 or self.stride_w < 1:
            raise InvalidParameterError("stride must be positive")
        if self.pad_h < 0 or self.pad_w < 0:
            raise InvalidParameterError("padding must be non-negative")
        if self.groups < 1 or out_ch % self.groups:
            raise InvalidParameterError(
                f"groups={self.groups} does not divide {out_ch} output channels"
            )
        if self.bias.shape != (out_ch,):
            raise ShapeError(
                f"bias shape {self.bias.shape} != ({out_ch},)", axis="out_channels"
            )


def conv_output_size(size, window, stride, pad):
    return (size + 2 * pad - window) // stride + 1


def _windows(xp, kh, kw, sh, sw, oh, ow):
    # (N, oh, ow, C, kh, kw) view, no copy yet
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : sh * (oh - 1) + 1 : sh, : sw * (ow - 1) + 1 : sw]


def conv2d_forward(x: np.ndarray, p: ConvParams):
    _require_rank(x, 4, "conv2d input")
    n, h, w, c = x.shape
    out_ch, kh, kw, cin = p.filters.shape
    if cin * p.groups != c:
        raise ShapeError(
            f"conv2d: input has {c} channels, filters expect {cin} x {p.groups} groups",
            axis="channels",
        )
    oh = conv_output_size(h, kh, p.stride_h, p.pad_h)
    ow = conv_output_size(w, kw, p.stride_w, p.pad_w)
    if oh < 1:
        raise ShapeError(f"conv2d: window {kh} exceeds padded height {h + 2 * p.pad_h}", axis="height")
    if ow < 1:
        raise ShapeError(f"conv2d: window {kw} exceeds padded width {w + 2 * p.pad_w}", axis="width")

    if p.pad_h or p.pad_w:
        xp = np.pad(x, ((0, 0), (p.pad_h, p.pad_h), (p.pad_w, p.pad_w), (0, 0)))
    else:
        xp = x
    win = _windows(xp, kh, kw, p.stride_h, p.stride_w, oh, ow).transpose(0, 1, 2, 4, 5, 3)
    og = out_ch // p.groups
    m = n * oh * ow
    cols, outs = [], []
    for g in range(p.groups):
        col = np.ascontiguousarray(win[..., g * cin : (g + 1) * cin]).reshape(m, kh * kw * cin)
        wg = p.filters[g * og : (g + 1) * og].reshape(og, -1)
        outs.append(col @ wg.T)
        cols.append(col)
    out = outs[0] if p.groups == 1 else np.concatenate(outs, axis=1)
    out = out.reshape(n, oh, ow, out_ch) + p.bias
    cache = (x.shape, cols, p, oh, ow)
    return _checked("conv2d", out), cache


def conv2d_backward(dout: np.ndarray, cache, need_dx: bool = True):
    """Return ``(dx, dfilters, dbias)``; ``dx`` is None when not requested."""
    x_shape, cols, p, oh, ow = cache
    n, h, w, c = x_shape
    out_ch, kh, kw, cin = p.filters.shape
    if dout.shape != (n, oh, ow, out_ch):
        raise ShapeError(f"conv2d_backward: upstream shape {dout.shape}", axis="gradient")
    og = out_ch // p.groups
    m = n * oh * ow
    d2 = dout.reshape(m, out_ch)
    dfilters = np.empty_like(p.filters)
    dcols = []
    for g in range(p.groups):
        dg = d2[:, g * og : (g + 1) * og]
        wg = p.filters[g * og : (g + 1) * og].reshape(og, -1)
        dfilters[g * og : (g + 1) * og] = (dg.T @ cols[g]).reshape(og, kh, kw, cin)
        if need_dx:
            dcols.append((dg @ wg).reshape(n, oh, ow, kh, kw, cin))
    dbias = d2.sum(axis=0)
    if not need_dx:
        return _checked("conv2d_backward", None, dfilters, dbias)
    dcol = dcols[0] if p.groups == 1 else np.concatenate(dcols, axis=-1)

    sh, sw = p.stride_h, p.stride_w
    dxp = np.zeros((n, h + 2 * p.pad_h, w + 2 * p.pad_w, c), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :] += dcol[:, :, :, i, j, :]
    dx = dxp[:, p.pad_h : p.pad_h + h, p.pad_w : p.pad_w + w, :]
    return _checked("conv2d_backward", np.ascontiguousarray(dx), dfilters, dbias)


def conv2d(x, p):
    return conv2d_forward(x, p)[0]


# ---------------------------------------------------------------------------
# max pooling
# ---------------------------------------------------------------------------

def maxpool2d_forward(x: np.ndarray, kh: int, kw: int, stride_h: int, stride_w: int):
    _require_rank(x, 4, "maxpool2d input")
    n, h, w, c = x.shape
    if kh < 1 or kw < 1 or stride_h < 1 or stride_w < 1:
        raise InvalidParameterError("pool window and stride must be positive")
    if kh > h or kw > w:
        raise InvalidParameterError(f"pool window {kh}x{kw} larger than input {h}x{w}")
    oh = (h - kh) // stride_h + 1
    ow = (w - kw) // stride_w + 1

    def tap(i, j):
        return x[:, i : i + stride_h * (oh - 1) + 1 : stride_h, j : j + stride_w * (ow - 1) + 1 : stride_w, :]

    out = tap(0, 0).copy()
    for i in range(kh):
        for j in range(kw):
            np.maximum(out, tap(i, j), out=out)
    # first hit in row-major window order owns the gradient
    idx = np.full(out.shape, -1, dtype=np.int16 if kh * kw < 32000 else np.int64)
    for i in range(kh):
        for j in range(kw):
            idx[(idx < 0) & (tap(i, j) == out)] = i * kw + j
    cache = (x.shape, idx, kh, kw, stride_h, stride_w)
    return _checked("maxpool2d", out), cache


def maxpool2d_backward(dout, cache):
    x_shape, idx, kh, kw, sh, sw = cache
    n, oh, ow, c = idx.shape
    dx = np.zeros(x_shape, dtype=dout.dtype)
    zero = np.zeros((), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            routed = np.where(idx == i * kw + j, dout, zero)
            dx[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :] += routed
    return _checked("maxpool2d_backward", dx)


def maxpool2d(x, kh, kw, stride_h, stride_w):
    return maxpool2d_forward(x, kh, kw, stride_h, stride_w)[0]


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x):
    if x.ndim > MAX_RANK:
        raise ShapeError(f"rank {x.ndim} exceeds {MAX_RANK}", axis="rank")
    return _checked("relu", np.maximum(x, 0)), x > 0


def relu_backward(dout, cache):
    return np.where(cache, dout, np.zeros((), dtype=dout.dtype))


def relu(x):
    return relu_forward(x)[0]


# ---------------------------------------------------------------------------
# local response normalization
# ---------------------------------------------------------------------------

@dataclass
class LrnParams:
    """Across-channel LRN; the window covers ``2 * depth_radius + 1`` channels."""

    depth_radius: int = 5
    bias: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def __post_init__(self):
        if self.depth_radius < 1:
            raise InvalidParameterError("LRN depth_radius must be >= 1")
        if self.bias <= 0 or self.beta <= 0 or self.alpha < 0:
            raise InvalidParameterError("LRN needs bias > 0, beta > 0, alpha >= 0")


def _channel_window_sum(a, radius):
    c = a.shape[-1]
    padded = np.pad(a, [(0, 0)] * (a.ndim - 1) + [(radius, radius)])
    total = np.zeros_like(a)
    for off in range(2 * radius + 1):
        total += padded[..., off : off + c]
    return total


def lrn_forward(x, p: LrnParams):
    _require_rank(x, 4, "lrn input")
    scale = p.alpha / p.depth_radius
    denom = p.bias + scale * _channel_window_sum(x * x, p.depth_radius)
    factor = denom ** (-p.beta)
    out = x * factor
    return _checked("lrn", out), (x, denom, factor, p)


def lrn_backward(dout, cache):
    x, denom, factor, p = cache
    scale = p.alpha / p.depth_radius
    inner = _channel_window_sum(dout * x * factor / denom, p.depth_radius)
    dx = dout * factor - (2.0 * p.beta * scale) * x * inner
    return _checked("lrn_backward", dx)


def lrn(x, p=None):
    return lrn_forward(x, p or LrnParams())[0]


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------

def linear_forward(x, weights, bias):
    _require_rank(x, 2, "linear input")
    if weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"linear: input features {x.shape[1]} vs weights {weights.shape}",
            axis="in_features",
        )
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} vs weights {weights.shape}", axis="out_features")
    out = x @ weights + bias
    return _checked("linear", out), (x, weights)


def linear_backward(dout, cache):
    """Return ``(dx, dweights, dbias)``."""
    x, weights = cache
    return _checked("linear_backward", dout @ weights.T, x.T @ dout, dout.sum(axis=0))


def linear(x, weights, bias):
    return linear_forward(x, weights, bias)[0]


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout_forward(x, keep_prob: float, mode: str = "train", rng=None):
    """Inverted dropout. ``infer`` mode (or keep_prob == 1) is the identity."""
    if not 0.0 < keep_prob <= 1.0:
        raise InvalidParameterError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if mode not in ("train", "infer"):
        raise InvalidParameterError(f"unknown mode {mode!r}")
    if mode == "infer" or keep_prob == 1.0:
        return x, None
    if rng is None:
        raise InvalidParameterError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) < keep_prob
    scale = keep.astype(x.dtype) / x.dtype.type(keep_prob)
    return _checked("dropout", x * scale), scale


def dropout_backward(dout, cache):
    return dout if cache is None else dout * cache


def dropout(x, keep_prob, mode="train", rng=None):
    return dropout_forward(x, keep_prob, mode, rng)[0]


# ---------------------------------------------------------------------------
# softmax + cross-entropy
# ---------------------------------------------------------------------------

def softmax(logits):
    _require_rank(logits, 2, "softmax input")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(labels, batch, classes):
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"labels shape {labels.shape} != ({batch},)", axis="batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be integer class indices")
    bad = np.flatnonzero((labels < 0) | (labels >= classes))
    if bad.size:
        r = int(bad[0])
        raise LabelError(f"row {r}: label {labels[r]} outside [0, {classes})", row=r)
    return labels


def softmax_xent(logits, labels):
    """Return ``(probs, mean negative log-likelihood)``."""
    batch, classes = logits.shape
    labels = _check_labels(labels, batch, classes)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    loss = -float(log_probs[np.arange(batch), labels].mean())
    _checked("softmax_xent", probs)
    return probs, loss


def softmax_xent_backward(probs, labels):
    batch = probs.shape[0]
    grad = probs.copy()
    grad[np.arange(batch), np.asarray(labels)] -= 1
    return grad / grad.dtype.type(batch)

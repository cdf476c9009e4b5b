"""Forward/backward kernels for the MobileNet-style layers.

Every forward returns ``(output, LayerTape)``.  Passing the tape and the
upstream gradient to :func:`backward` yields ``(grad_input, grad_params)``
where ``grad_params`` maps dotted field names (``"weight"``,
``"fc1.bias"``, ``"dw_bn.gamma"``...) to arrays.  A tape can be consumed
once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ShapeError, TapeError
from .tensor_core import Rng, col2im, conv_output_size, ensure_finite, im2col

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

TRAINABLE_FIELDS = ("weight", "bias", "gamma", "beta")
BUFFER_FIELDS = ("running_mean", "running_var")


@dataclass(eq=False)
class LayerParams:
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    gamma: np.ndarray | None = None
    beta: np.ndarray | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def trainable(self):
        for name in TRAINABLE_FIELDS:
            value = getattr(self, name)
            if value is not None:
                yield name, value

    def buffers(self):
        for name in BUFFER_FIELDS:
            value = getattr(self, name)
            if value is not None:
                yield name, value


@dataclass(eq=False)
class LayerTape:
    op: str
    out_shape: tuple
    cache: dict
    backward_fn: Callable
    consumed: bool = False


def backward(tape: LayerTape, grad_out: np.ndarray):
    """Run the backward pass recorded in ``tape``; returns ``(grad_in, grad_params)``."""
    if tape.consumed:
        raise TapeError(f"{tape.op} tape already consumed")
    if tuple(grad_out.shape) != tuple(tape.out_shape):
        raise TapeError(
            f"{tape.op}: grad shape {grad_out.shape} does not match output {tape.out_shape}"
        )
    tape.consumed = True
    return tape.backward_fn(tape.cache, grad_out)


def _f64(a):
    return a.astype(np.float64, copy=False)


# -- convolution ------------------------------------------------------------


def conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, pad: int = 0, groups: int = 1):
    """Grouped 2-D convolution via im2col; groups == C_in gives depthwise, k == 1 pointwise."""
    w = params.weight
    if x.ndim != 4:
        raise ShapeError(f"conv2d needs NCHW input, got {x.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_per_group, kh, kw = w.shape
    if c_in % groups or c_out % groups or c_per_group != c_in // groups:
        raise ShapeError(f"weight {w.shape} incompatible with {c_in} inputs in {groups} groups")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    L = n * ho * wo
    taps = c_per_group * kh * kw
    if groups == 1:
        out = _f64(w.reshape(c_out, taps)) @ _f64(cols)
    elif c_per_group == 1 and c_out == groups:
        # depthwise: per-channel tap sums, avoids a batched matmul with tiny inner dims
        cg = cols.reshape(groups, kh * kw, L)
        wg = _f64(w.reshape(groups, kh * kw))
        out = wg[:, 0, None] * cg[:, 0]
        for k in range(1, kh * kw):
            out += wg[:, k, None] * cg[:, k]
    else:
        out = np.matmul(
            _f64(w.reshape(groups, c_out // groups, taps)), _f64(cols.reshape(groups, taps, L))
        ).reshape(c_out, L)
    out = out.reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    if params.bias is not None:
        out = out + params.bias.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out, dtype=x.dtype)
    cache = dict(x=x, weight=w, stride=stride, pad=pad, groups=groups, has_bias=params.bias is not None)
    return ensure_finite(out, "conv2d"), LayerTape("conv2d", out.shape, cache, _conv2d_backward)


def _conv2d_backward(cache, grad):
    x, w = cache["x"], cache["weight"]
    stride, pad, groups = cache["stride"], cache["pad"], cache["groups"]
    c_out, c_per_group, kh, kw = w.shape
    c_in = x.shape[1]
    cols = im2col(x, kh, kw, stride, pad)
    L = cols.shape[1]
    taps = c_per_group * kh * kw
    g = _f64(grad.transpose(1, 0, 2, 3).reshape(c_out, L))
    if groups == 1:
        dw = g @ _f64(cols).T
        dcols = _f64(w.reshape(c_out, taps)).T @ g
    elif c_per_group == 1 and c_out == groups:
        cg = cols.reshape(groups, kh * kw, L)
        wg = _f64(w.reshape(groups, kh * kw))
        dw = np.empty((groups, kh * kw))
        for k in range(kh * kw):
            dw[:, k] = np.einsum("gl,gl->g", g, cg[:, k])
        dcols = wg[:, :, None] * g[:, None, :]
    else:
        gg = g.reshape(groups, c_out // groups, L)
        cg = _f64(cols.reshape(groups, taps, L))
        wg = _f64(w.reshape(groups, c_out // groups, taps))
        dw = np.matmul(gg, cg.transpose(0, 2, 1))
        dcols = np.matmul(wg.transpose(0, 2, 1), gg)
    dx = col2im(dcols.reshape(c_in * kh * kw, L), x.shape, kh, kw, stride, pad)
    grads = {"weight": dw.reshape(w.shape).astype(w.dtype)}
    if cache["has_bias"]:
        grads["bias"] = g.sum(axis=1).astype(w.dtype)
    return dx.astype(x.dtype), grads


# -- batch normalization ----------------------------------------------------


def batchnorm(
    x: np.ndarray,
    params: LayerParams,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Per-channel batch norm over (N,H,W).

    Training mode normalizes with batch statistics and updates the running
    buffers in place on ``params`` (mean with the biased batch mean, variance
    with the unbiased batch variance).  Inference uses the buffers only.
    """
    c = x.shape[1]
    if params.gamma.shape != (c,) or params.beta.shape != (c,):
        raise ShapeError(f"batchnorm params for {params.gamma.shape[0]} channels, input has {c}")
    xd = _f64(x)
    gamma = _f64(params.gamma).reshape(1, c, 1, 1)
    beta = _f64(params.beta).reshape(1, c, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise ShapeError("batchnorm in training mode needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        rm, rv = params.running_mean, params.running_var
        params.running_mean = ((1 - momentum) * rm + momentum * mean).astype(rm.dtype)
        params.running_var = ((1 - momentum) * rv + momentum * var * count / (count - 1)).astype(rv.dtype)
    else:
        mean = _f64(params.running_mean)
        var = _f64(params.running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = (gamma * xhat + beta).astype(x.dtype)
    cache = dict(xhat=xhat, inv_std=inv_std, gamma=params.gamma, training=training, dtype=x.dtype)
    return ensure_finite(out, "batchnorm"), LayerTape("batchnorm", out.shape, cache, _batchnorm_backward)


def _batchnorm_backward(cache, grad):
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    c = xhat.shape[1]
    g = _f64(grad)
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * _f64(gamma).reshape(1, c, 1, 1)
    if cache["training"]:
        m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        dx = (inv_std.reshape(1, c, 1, 1) / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        dx = dxhat * inv_std.reshape(1, c, 1, 1)
    pdt = gamma.dtype
    return dx.astype(cache["dtype"]), {"gamma": dgamma.astype(pdt), "beta": dbeta.astype(pdt)}


# -- pointwise nonlinearities -----------------------------------------------


def _sigmoid(x):
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activation(kind: str, x: np.ndarray):
    """``relu6`` or ``sigmoid`` (``relu`` is available for the SE gate's hidden layer)."""
    if kind == "relu6":
        out = np.clip(x, 0, 6)
    elif kind == "relu":
        out = np.maximum(x, 0)
    elif kind == "sigmoid":
        out = _sigmoid(_f64(x))
    else:
        raise ValueError(f"unknown activation {kind!r}")
    out = out.astype(x.dtype, copy=False)
    cache = dict(kind=kind, x=x, out=out)
    return ensure_finite(out, kind), LayerTape(kind, out.shape, cache, _activation_backward)


def _activation_backward(cache, grad):
    kind, x = cache["kind"], cache["x"]
    if kind == "relu6":
        # kinks at 0 and 6 block the gradient
        dx = grad * ((x > 0) & (x < 6))
    elif kind == "relu":
        dx = grad * (x > 0)
    else:
        s = _f64(cache["out"])
        dx = _f64(grad) * s * (1.0 - s)
    return dx.astype(x.dtype), {}


# -- pooling / dense / dropout ----------------------------------------------


def global_avg_pool(x: np.ndarray):
    out = _f64(x).mean(axis=(2, 3), keepdims=True).astype(x.dtype)
    return out, LayerTape("global_avg_pool", out.shape, dict(shape=x.shape, dtype=x.dtype), _gap_backward)


def _gap_backward(cache, grad):
    n, c, h, w = cache["shape"]
    dx = np.broadcast_to(_f64(grad) / (h * w), (n, c, h, w))
    return dx.astype(cache["dtype"]), {}


def fully_connected(x: np.ndarray, params: LayerParams):
    """``out = x @ W.T + b`` with W of shape (K, C)."""
    w = params.weight
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weight {w.shape}")
    out = _f64(x) @ _f64(w).T
    if params.bias is not None:
        out = out + params.bias
    out = out.astype(x.dtype)
    cache = dict(x=x, weight=w, has_bias=params.bias is not None)
    return ensure_finite(out, "fully_connected"), LayerTape("fully_connected", out.shape, cache, _fc_backward)


def _fc_backward(cache, grad):
    x, w = cache["x"], cache["weight"]
    g = _f64(grad)
    grads = {"weight": (g.T @ _f64(x)).astype(w.dtype)}
    if cache["has_bias"]:
        grads["bias"] = g.sum(axis=0).astype(w.dtype)
    return (g @ _f64(w)).astype(x.dtype), grads


def dropout(x: np.ndarray, rate: float, training: bool, rng: Rng | None = None):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time, inference is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        mask = None
        out = x
    else:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = rng.random(x.shape) >= rate
        mask = (keep * (1.0 / (1.0 - rate))).astype(x.dtype)
        out = x * mask
    return out, LayerTape("dropout", out.shape, dict(mask=mask), _dropout_backward)


def _dropout_backward(cache, grad):
    mask = cache["mask"]
    return (grad if mask is None else grad * mask), {}


# -- composite blocks -------------------------------------------------------


def _chain_backward(steps, grad):
    """Backprop through ``[(name, tape), ...]`` in reverse, prefixing param grads with ``name``."""
    grads = {}
    for name, tape in reversed(steps):
        grad, g = backward(tape, grad)
        for k, v in g.items():
            grads[f"{name}.{k}"] = v
    return grad, grads


def se_block(x: np.ndarray, fc1: LayerParams, fc2: LayerParams, reduction: int | None = None):
    """Squeeze-and-Excitation: rescale channels by sigmoid(fc2(relu(fc1(gap(x)))))."""
    n, c = x.shape[:2]
    if fc1.weight.shape[1] != c or fc2.weight.shape[0] != c:
        raise ShapeError(f"SE weights {fc1.weight.shape}/{fc2.weight.shape} vs {c} channels")
    if reduction is not None and fc1.weight.shape[0] != max(1, c // reduction):
        raise ShapeError(f"SE hidden width {fc1.weight.shape[0]} != max(1, {c}//{reduction})")
    s, gap_tape = global_avg_pool(x)
    steps = []
    z, t = fully_connected(s.reshape(n, c), fc1)
    steps.append(("fc1", t))
    z, t = activation("relu", z)
    steps.append(("relu", t))
    z, t = fully_connected(z, fc2)
    steps.append(("fc2", t))
    gate, t = activation("sigmoid", z)
    steps.append(("gate", t))
    out = (x * gate.reshape(n, c, 1, 1)).astype(x.dtype)
    cache = dict(x=x, gate=gate, steps=steps, gap=gap_tape)
    return ensure_finite(out, "se_block"), LayerTape("se_block", out.shape, cache, _se_backward)


def _se_backward(cache, grad):
    x, gate = cache["x"], cache["gate"]
    n, c = x.shape[:2]
    dgate = (_f64(grad) * _f64(x)).sum(axis=(2, 3)).astype(x.dtype)
    d_s, grads = _chain_backward(cache["steps"], dgate)
    d_pool, _ = backward(cache["gap"], d_s.reshape(n, c, 1, 1))
    dx = _f64(grad) * _f64(gate).reshape(n, c, 1, 1) + _f64(d_pool)
    return dx.astype(x.dtype), grads


@dataclass(eq=False)
class BlockParams:
    """One inverted-residual bottleneck: config plus its sub-layer parameters."""

    in_channels: int
    out_channels: int
    hidden: int
    stride: int
    expand_ratio: int
    use_se: bool
    layers: dict = field(default_factory=dict)

    @property
    def use_residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def inverted_residual(
    x: np.ndarray,
    block: BlockParams,
    training: bool = False,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """expand 1x1 -> BN -> ReLU6 -> depthwise 3x3 -> BN -> ReLU6 -> [SE] -> project 1x1 -> BN (+ skip)."""
    if block.stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {block.stride}")
    if x.shape[1] != block.in_channels:
        raise ShapeError(f"block expects {block.in_channels} channels, got {x.shape[1]}")
    L = block.layers
    steps = []
    h = x
    if block.expand_ratio != 1:
        h, t = conv2d(h, L["expand_conv"])
        steps.append(("expand_conv", t))
        h, t = batchnorm(h, L["expand_bn"], training, momentum, eps)
        steps.append(("expand_bn", t))
        h, t = activation("relu6", h)
        steps.append(("expand_act", t))
    h, t = conv2d(h, L["dw_conv"], stride=block.stride, pad=1, groups=block.hidden)
    steps.append(("dw_conv", t))
    h, t = batchnorm(h, L["dw_bn"], training, momentum, eps)
    steps.append(("dw_bn", t))
    h, t = activation("relu6", h)
    steps.append(("dw_act", t))
    if block.use_se:
        h, t = se_block(h, L["se_fc1"], L["se_fc2"])
        steps.append(("se", t))
    h, t = conv2d(h, L["project_conv"])
    steps.append(("project_conv", t))
    h, t = batchnorm(h, L["project_bn"], training, momentum, eps)
    steps.append(("project_bn", t))
    if block.use_residual:
        h = (h + x).astype(x.dtype)
    cache = dict(steps=steps, residual=block.use_residual)
    return ensure_finite(h, "inverted_residual"), LayerTape(
        "inverted_residual", h.shape, cache, _inverted_residual_backward
    )


def _inverted_residual_backward(cache, grad):
    dx, grads = _chain_backward(cache["steps"], grad)
    if cache["residual"]:
        dx = dx + grad
    renamed = {("se_" + k[3:] if k.startswith("se.") else k): v for k, v in grads.items()}
    return dx, renamed

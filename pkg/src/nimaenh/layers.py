"""Differentiable layer primitives: padding, dilated conv, activations, head ops.

All tensors are laid out [height, width, channels]; convolution weights are
[kh, kw, in_channels, out_channels]. Every op registered here comes with an
exact reverse-mode rule, so whole models built from them pass finite
difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatchError, Tensor, apply_op, lift, register_op


class MarginTooLargeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# padding

def _sympad_fwd(attrs, x):
    # edge-inclusive reflection: [1,2,3] with margin 1 -> [1,1,2,3,3]
    mh, mw = attrs["mh"], attrs["mw"]
    h, w = x.shape[0], x.shape[1]
    if mh > h or mw > w:
        raise MarginTooLargeError(
            f"margins ({mh}, {mw}) exceed spatial extents ({h}, {w})"
        )
    out = np.empty((h + 2 * mh, w + 2 * mw) + x.shape[2:])
    out[mh:mh + h, mw:mw + w] = x
    if mh:
        out[:mh, mw:mw + w] = x[:mh][::-1]
        out[mh + h:, mw:mw + w] = x[h - mh:][::-1]
    if mw:
        out[:, :mw] = out[:, mw:2 * mw][:, ::-1]
        out[:, mw + w:] = out[:, w:mw + w][:, ::-1]
    return out


def _sympad_bwd(attrs, g, vals, out, ctx):
    mh, mw = attrs["mh"], attrs["mw"]
    h, w = vals[0].shape[0], vals[0].shape[1]
    mid = np.array(g[:, mw:mw + w])
    if mw:
        mid[:, :mw] += g[:, :mw][:, ::-1]
        mid[:, w - mw:] += g[:, mw + w:][:, ::-1]
    gx = np.array(mid[mh:mh + h])
    if mh:
        gx[:mh] += mid[:mh][::-1]
        gx[h - mh:] += mid[mh + h:][::-1]
    return (gx,)


def _zeropad_fwd(attrs, x):
    mh, mw = attrs["mh"], attrs["mw"]
    widths = [(mh, mh), (mw, mw)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, widths)


def _zeropad_bwd(attrs, g, vals, out, ctx):
    mh, mw = attrs["mh"], attrs["mw"]
    h, w = vals[0].shape[0], vals[0].shape[1]
    return (np.array(g[mh:mh + h, mw:mw + w]),)


register_op("symmetric_pad", _sympad_fwd, _sympad_bwd)
register_op("zero_pad", _zeropad_fwd, _zeropad_bwd)


def symmetric_pad(x, margin_h: int, margin_w: int):
    """Mirror-reflect borders (edge-inclusive) by the given margins."""
    if margin_h < 0 or margin_w < 0:
        raise ValueError("margins must be nonnegative")
    if margin_h == 0 and margin_w == 0:
        return lift(x)
    return apply_op("symmetric_pad", (lift(x),), mh=margin_h, mw=margin_w)


def zero_pad(x, margin_h: int, margin_w: int):
    if margin_h < 0 or margin_w < 0:
        raise ValueError("margins must be nonnegative")
    if margin_h == 0 and margin_w == 0:
        return lift(x)
    return apply_op("zero_pad", (lift(x),), mh=margin_h, mw=margin_w)


# ---------------------------------------------------------------------------
# dilated convolution (valid region; padding is composed outside)

# Recycled column workspaces, keyed by shape. The matrices are several MB
# and fully overwritten on every use; reusing them keeps the pages warm
# across training steps. A buffer is taken in the forward pass, carried in
# the node ctx, and returned once the reverse pass has consumed it.
_COLS_POOL = {}
_COLS_POOL_DEPTH = 4


def _cols_take(shape):
    stack = _COLS_POOL.get(shape)
    if stack:
        return stack.pop()
    return np.empty(shape)


def _cols_give(arr):
    stack = _COLS_POOL.setdefault(arr.shape, [])
    if len(stack) < _COLS_POOL_DEPTH:
        stack.append(arr)


def _conv_fwd(attrs, x, w, b):
    d, s = attrs["dilation"], attrs["stride"]
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeMismatchError(f"conv expects image[H,W,C] and weights[kh,kw,Cin,Cout], got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[2] != cin:
        raise ShapeMismatchError(f"channel mismatch: input has {x.shape[2]} channels, weights expect {cin}")
    if b.shape != (cout,):
        raise ShapeMismatchError(f"bias shape {b.shape} != ({cout},)")
    span_h, span_w = d * (kh - 1), d * (kw - 1)
    ho = (x.shape[0] - span_h - 1) // s + 1
    wo = (x.shape[1] - span_w - 1) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(f"input {x.shape[:2]} too small for kernel span ({span_h + 1}, {span_w + 1})")
    # one tap-gathered column matrix, kept for the reverse pass
    cols = _cols_take((ho * wo, kh * kw * cin))
    for ki in range(kh):
        for kj in range(kw):
            block = (ki * kw + kj) * cin
            cols[:, block:block + cin] = x[
                ki * d:ki * d + s * ho:s, kj * d:kj * d + s * wo:s, :
            ].reshape(-1, cin)
    out = (cols @ w.reshape(-1, cout) + b).reshape(ho, wo, cout)
    return out, cols


def _conv_bwd(attrs, g, vals, out, cols):
    d, s = attrs["dilation"], attrs["stride"]
    x, w, _ = vals
    kh, kw, cin, cout = w.shape
    ho, wo = g.shape[0], g.shape[1]
    g2 = np.ascontiguousarray(g).reshape(-1, cout)
    gw = (cols.T @ g2).reshape(w.shape)
    _cols_give(cols)
    gx = np.zeros_like(x)
    for ki in range(kh):
        for kj in range(kw):
            gx[ki * d:ki * d + s * ho:s, kj * d:kj * d + s * wo:s, :] += (
                g2 @ w[ki, kj].T
            ).reshape(ho, wo, cin)
    return gx, gw, g2.sum(axis=0)


register_op("conv_valid", _conv_fwd, _conv_bwd)


@dataclass
class ConvLayer:
    """One convolution stage: weights [kh,kw,Cin,Cout], bias [Cout]."""

    weights: Tensor
    bias: Tensor
    dilation: int = 1
    padding_mode: str = "symmetric"
    stride: int = 1

    def __post_init__(self):
        kh, kw = self.weights.shape[0], self.weights.shape[1]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.padding_mode not in ("symmetric", "zero"):
            raise ValueError(f"unknown padding_mode {self.padding_mode!r}")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    @property
    def margin(self) -> int:
        kh = self.weights.shape[0]
        if kh == 1:  # 1x1 kernels ignore dilation
            return 0
        return self.dilation * (kh - 1) // 2


def conv2d(x, layer: ConvLayer, *, weights=None, bias=None):
    """Stride-s dilated convolution with same-size padding.

    ``weights``/``bias`` expressions override the layer's stored tensors,
    which lets models route trainable parameter leaves through the shared
    layer description.
    """
    w = lift(layer.weights.data) if weights is None else weights
    b = lift(layer.bias.data) if bias is None else bias
    m = layer.margin
    h = lift(x)
    if m > 0:
        pad = symmetric_pad if layer.padding_mode == "symmetric" else zero_pad
        h = pad(h, m, m)
    d = 1 if layer.weights.shape[0] == 1 else layer.dilation
    return apply_op("conv_valid", (h, w, b), dilation=d, stride=layer.stride)


# ---------------------------------------------------------------------------
# activations and head ops

def _leaky_fwd(attrs, x):
    a = attrs["slope"]
    return np.where(x >= 0, x, a * x)


def _leaky_bwd(attrs, g, vals, out, ctx):
    a = attrs["slope"]
    # subgradient at the kink uses the negative-branch slope
    return (np.where(vals[0] > 0, g, a * g),)


def _gap_fwd(attrs, x):
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeMismatchError(f"global pooling expects a nonempty [H,W,C] image, got {x.shape}")
    return x.mean(axis=(0, 1))


def _gap_bwd(attrs, g, vals, out, ctx):
    x = vals[0]
    return (np.broadcast_to(g / (x.shape[0] * x.shape[1]), x.shape).copy(),)


def _affine_fwd(attrs, x, w, b):
    if x.ndim != 1 or w.ndim != 2 or x.shape[0] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatchError(f"affine shapes incompatible: x {x.shape}, W {w.shape}, b {b.shape}")
    return x @ w + b


def _affine_bwd(attrs, g, vals, out, ctx):
    x, w, _ = vals
    return w @ g, np.outer(x, g), g


def _softmax_fwd(attrs, z):
    if z.ndim != 1:
        raise ShapeMismatchError(f"softmax expects a vector, got shape {z.shape}")
    e = np.exp(z - z.max())
    return e / e.sum()


def _softmax_bwd(attrs, g, vals, out, ctx):
    return (out * (g - np.dot(g, out)),)


register_op("leaky_relu", _leaky_fwd, _leaky_bwd)
register_op("global_average_pool", _gap_fwd, _gap_bwd)
register_op("affine", _affine_fwd, _affine_bwd)
register_op("softmax", _softmax_fwd, _softmax_bwd)


def leaky_relu(x, slope: float = 0.2):
    """x for x >= 0, slope*x otherwise."""
    if not 0 <= slope < 1:
        raise ValueError(f"slope must lie in [0, 1), got {slope}")
    return apply_op("leaky_relu", (lift(x),), slope=slope)


def global_average_pool(x):
    """Per-channel spatial mean: [H,W,C] -> [C]."""
    return apply_op("global_average_pool", (lift(x),))


def fully_connected(x, weights, bias):
    """logits = x @ W + b for a feature vector x."""
    return apply_op("affine", (lift(x), lift(weights), lift(bias)))


def softmax(z):
    """Max-shifted softmax; positive outputs summing to 1."""
    return apply_op("softmax", (lift(z),))


# ---------------------------------------------------------------------------
# initialization

@dataclass
class InitSpec:
    scheme: str = "fan-in-scaled-gaussian"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("fan-in-scaled-gaussian", "identity-plus-noise"):
            raise ValueError(f"unknown init scheme {self.scheme!r}")


def _identity_plus_noise(rng, shape, noise_base=5e-3):
    # noise scaled by fan-in so the composed network stays near identity
    kh, kw, cin, cout = shape
    w = rng.normal(0.0, noise_base / np.sqrt(kh * kw * cin), size=shape)
    for o in range(cout):
        w[kh // 2, kw // 2, o % cin, o] += 1.0
    return w


def init_conv_weights(rng, shape, scheme: str) -> np.ndarray:
    kh, kw, cin, _ = shape
    if scheme == "identity-plus-noise":
        return _identity_plus_noise(rng, shape)
    fan_in = kh * kw * cin
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_dense_weights(rng, shape) -> np.ndarray:
    fan_in = shape[0]
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_parameters(spec: InitSpec, shapes: dict) -> dict:
    """Deterministically initialize a named set of layer shapes.

    4-d shapes are treated as conv weights, 2-d as dense weights, 1-d as
    biases (zeros). Draw order follows the dict order of ``shapes``.
    """
    rng = np.random.default_rng(spec.seed)
    params = {}
    for name, shape in shapes.items():
        shape = tuple(shape)
        if len(shape) == 4:
            params[name] = Tensor(init_conv_weights(rng, shape, spec.scheme))
        elif len(shape) == 2:
            params[name] = Tensor(init_dense_weights(rng, shape))
        elif len(shape) == 1:
            params[name] = Tensor(np.zeros(shape))
        else:
            raise ValueError(f"unsupported parameter rank for {name!r}: {shape}")
    return params

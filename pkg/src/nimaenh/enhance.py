"""Dilated-convolution enhancement network and the composite training loss.

The enhancer is a fully convolutional stack whose dilation grows
exponentially with depth, so each output pixel aggregates context from a
large neighbourhood at constant depth. Intermediate feature maps are
symmetrically padded; the final stage is an undilated 3x3 layer followed
by a linear 1x1 projection back to RGB.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Expression, Tensor
from .layers import ConvLayer, conv2d, init_conv_weights, leaky_relu
from .quality import NimaModel, penalty_graph


class ImageTooSmallError(ValueError):
    pass


def default_dilation_schedule(depth: int) -> list:
    """Dilations 1,2,4,...  then an undilated 3x3 stage, then the 1x1 layer."""
    if depth == 1:
        return [1]
    return [2 ** k for k in range(depth - 2)] + [1, 1]


@dataclass
class CanConfig:
    depth: int = 10
    width: int = 32
    dilation_schedule: list = None
    leaky_slope: float = 0.2
    padding_mode: str = "symmetric"
    channels: int = 3

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError(f"depth and width must be positive, got {self.depth}, {self.width}")
        if not 0 <= self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in [0, 1)")
        if self.dilation_schedule is None:
            self.dilation_schedule = default_dilation_schedule(self.depth)
        self.dilation_schedule = [int(d) for d in self.dilation_schedule]
        if len(self.dilation_schedule) != self.depth:
            raise ValueError(
                f"schedule length {len(self.dilation_schedule)} != depth {self.depth}"
            )
        if any(d < 1 for d in self.dilation_schedule):
            raise ValueError("dilations must be positive")
        if self.dilation_schedule[-1] != 1:
            raise ValueError("final schedule entry must be 1 (the output layer is undilated)")

    def kernel_size(self, layer_index: int) -> int:
        if self.depth == 1:
            return 1
        return 1 if layer_index == self.depth - 1 else 3

    def max_margin(self) -> int:
        margins = [
            0 if self.kernel_size(i) == 1 else self.dilation_schedule[i]
            for i in range(self.depth)
        ]
        return max(margins)


@dataclass
class CanModel:
    config: CanConfig
    layers: list = field(default_factory=list)

    def parameters(self) -> dict:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.weights"] = layer.weights
            params[f"layers.{i}.bias"] = layer.bias
        return params

    def bindings(self, prefix: str = "can") -> dict:
        return {f"{prefix}.{k}": v for k, v in self.parameters().items()}

    def graph(self, x, prefix: str = "can", trainable: bool = True) -> Expression:
        """Enhanced-image expression; every stage but the last is nonlinear."""
        h = ad.lift(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            if trainable:
                w = ad.param(f"{prefix}.layers.{i}.weights")
                b = ad.param(f"{prefix}.layers.{i}.bias")
            else:
                w = ad.const(layer.weights.data)
                b = ad.const(layer.bias.data)
            h = conv2d(h, layer, weights=w, bias=b)
            if i != last:
                h = leaky_relu(h, self.config.leaky_slope)
        return h

    def copy(self) -> "CanModel":
        layers = [
            ConvLayer(
                Tensor(l.weights.data.copy()),
                Tensor(l.bias.data.copy()),
                dilation=l.dilation,
                padding_mode=l.padding_mode,
                stride=l.stride,
            )
            for l in self.layers
        ]
        return CanModel(config=self.config, layers=layers)

    def param_count(self) -> int:
        return int(np.sum([t.data.size for t in self.parameters().values()]))

    def param_bytes(self) -> bytes:
        return b"".join(t.data.tobytes() for _, t in sorted(self.parameters().items()))


def build_can(config: CanConfig | None = None, seed: int = 0) -> CanModel:
    """Construct the enhancer with identity-plus-noise initialization.

    Layer 0 maps 3 -> width, intermediate layers keep width, and the final
    1x1 layer maps back to 3 channels with no nonlinearity, so an untrained
    model is approximately the identity.
    """
    config = config or CanConfig()
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(config.depth):
        k = config.kernel_size(i)
        cin = config.channels if i == 0 else config.width
        cout = config.channels if i == config.depth - 1 else config.width
        shape = (k, k, cin, cout)
        layers.append(
            ConvLayer(
                Tensor(init_conv_weights(rng, shape, "identity-plus-noise")),
                Tensor(np.zeros(cout)),
                dilation=config.dilation_schedule[i],
                padding_mode=config.padding_mode,
            )
        )
    return CanModel(config=config, layers=layers)


def check_min_size(config: CanConfig, height: int, width: int):
    """Spatial extents must strictly exceed the largest padding margin."""
    margin = config.max_margin()
    if height <= margin or width <= margin:
        limiting = max(
            (d for i, d in enumerate(config.dilation_schedule) if config.kernel_size(i) == 3),
            default=0,
        )
        raise ImageTooSmallError(
            f"image {height}x{width} too small: dilation {limiting} needs extents > {margin}"
        )


def can_forward(model: CanModel, x):
    """Apply the enhancer; spatial dimensions are preserved.

    Accepts a concrete [H,W,3] image (returns a ``Tensor``) or an
    ``Expression`` (returns the enhanced-image expression bound to the
    model's parameter leaves).
    """
    if isinstance(x, Expression):
        return model.graph(x)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != model.config.channels:
        raise ValueError(f"expected [H,W,{model.config.channels}] image, got shape {x.shape}")
    check_min_size(model.config, x.shape[0], x.shape[1])
    expr = model.graph(ad.inp("x"), trainable=False)
    return ad.evaluate(expr, {"x": x})


def receptive_field(config: CanConfig) -> int:
    """1 + sum over layers of dilation * (kernel - 1)."""
    span = 1
    for i in range(config.depth):
        span += config.dilation_schedule[i] * (config.kernel_size(i) - 1)
    return span


def mse_graph(y, x_r) -> Expression:
    diff = ad.sub(ad.lift(y), ad.lift(x_r))
    return ad.mean(ad.mul(diff, diff))


def perceptual_loss(x_r, y, nima: NimaModel | None, gamma: float):
    """Data-fidelity MSE plus gamma times the quality penalty of ``y``.

    With gamma 0 the predictor is not evaluated at all and the loss is the
    plain L2 baseline. Returns an ``Expression`` when either image argument
    is one, otherwise a float.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    symbolic = isinstance(x_r, Expression) or isinstance(y, Expression)
    if not symbolic:
        x_r = np.asarray(x_r, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x_r.shape != y.shape:
            raise ad.ShapeMismatchError(f"image shapes differ: {x_r.shape} vs {y.shape}")
    loss = mse_graph(y, x_r)
    if gamma > 0:
        if nima is None:
            raise ValueError("gamma > 0 requires a quality model")
        loss = loss + gamma * penalty_graph(nima, ad.lift(y), trainable=False)
    if symbolic:
        return loss
    return float(ad.evaluate(loss).data)

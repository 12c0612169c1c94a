"""No-reference quality prediction over ordered rating buckets.

An image is scored by a small convolutional backbone whose head is a global
average pool, a 10-way fully-connected layer, and a softmax, yielding a
probability mass over rating buckets 1..10. The mean of that mass is the
quality score; 10 minus the score is the penalty used as a training loss.
Distribution distance is the normalized earth mover's distance over bucket
CDFs, squared (order 2) for training and order 1 for reported metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Expression, Tensor
from .layers import (
    ConvLayer,
    conv2d,
    fully_connected,
    global_average_pool,
    init_conv_weights,
    init_dense_weights,
    leaky_relu,
    softmax,
)


class InvalidDistributionError(ValueError):
    pass


@dataclass(frozen=True)
class RatingDistribution:
    """Probability mass over ordered score buckets 1..N (N=10 by default)."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or probs.size < 2:
            raise InvalidDistributionError(f"expected a vector of >=2 bucket masses, got shape {probs.shape}")
        if np.any(probs < 0):
            raise InvalidDistributionError("bucket masses must be nonnegative")
        total = probs.sum()
        if abs(total - 1.0) > 1e-9:
            raise InvalidDistributionError(f"bucket masses sum to {total}, not 1")

    @property
    def n(self) -> int:
        return self.probs.size

    def mean_score(self) -> float:
        return nima_score(self)


def as_distribution(p) -> RatingDistribution:
    if isinstance(p, RatingDistribution):
        return p
    return RatingDistribution(np.asarray(p, dtype=np.float64))


# ---------------------------------------------------------------------------
# earth mover's distance over CDFs

def emd(p, p_hat, order) -> float:
    """Normalized EMD: ((1/N) * sum_k |CDF_p(k) - CDF_phat(k)|^order)^(1/order)."""
    if order <= 0:
        raise ValueError("order must be positive")
    pd, qd = as_distribution(p), as_distribution(p_hat)
    if pd.n != qd.n:
        raise InvalidDistributionError(f"bucket counts differ: {pd.n} vs {qd.n}")
    delta = np.abs(np.cumsum(pd.probs) - np.cumsum(qd.probs))
    return float((np.sum(delta ** order) / pd.n) ** (1.0 / order))


def emd_train_loss(p, p_hat):
    """Squared order-2 EMD: (1/N) * sum_k (CDF_p(k) - CDF_phat(k))^2.

    Differentiable everywhere; returns an ``Expression`` when either
    argument is one, otherwise a float computed through the same graph.
    """
    symbolic = isinstance(p, Expression) or isinstance(p_hat, Expression)
    if not symbolic:
        pd, qd = as_distribution(p), as_distribution(p_hat)
        if pd.n != qd.n:
            raise InvalidDistributionError(f"bucket counts differ: {pd.n} vs {qd.n}")
        p, p_hat = pd.probs, qd.probs
    diff = ad.sub(ad.cumsum(ad.lift(_probs(p))), ad.cumsum(ad.lift(_probs(p_hat))))
    loss = ad.mean(ad.mul(diff, diff))
    if symbolic:
        return loss
    return float(ad.evaluate(loss).data)


def _probs(p):
    if isinstance(p, Expression):
        return p
    if isinstance(p, RatingDistribution):
        return p.probs
    return np.asarray(p, dtype=np.float64)


def nima_score(p_hat):
    """Mean of the rating mass: sum_i s_i * p_i with bucket scores 1..N."""
    if isinstance(p_hat, Expression):
        scores = np.arange(1.0, 11.0)
        return ad.sum(ad.mul(p_hat, ad.const(scores)))
    d = as_distribution(p_hat)
    scores = np.arange(1.0, d.n + 1.0)
    return float(np.dot(scores, d.probs))


# ---------------------------------------------------------------------------
# the predictor model

@dataclass
class NimaConfig:
    channels: tuple = (8, 16, 32, 32)
    kernel: int = 3
    stride: int = 2
    leaky_slope: float = 0.2
    num_buckets: int = 10
    padding_mode: str = "symmetric"

    def __post_init__(self):
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError(f"invalid channel stack {self.channels}")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be odd and positive")
        if self.stride not in (1, 2):
            raise ValueError("backbone stride must be 1 or 2")
        if not 0 <= self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in [0, 1)")
        if self.num_buckets < 2:
            raise ValueError("need at least 2 rating buckets")


@dataclass
class NimaModel:
    """Backbone conv stack plus pool / fully-connected / softmax head."""

    config: NimaConfig
    backbone: list = field(default_factory=list)
    head_weights: Tensor = None
    head_bias: Tensor = None
    frozen: bool = False

    def parameters(self) -> dict:
        params = {}
        for i, layer in enumerate(self.backbone):
            params[f"backbone.{i}.weights"] = layer.weights
            params[f"backbone.{i}.bias"] = layer.bias
        params["head.weights"] = self.head_weights
        params["head.bias"] = self.head_bias
        return params

    def bindings(self, prefix: str = "nima") -> dict:
        return {f"{prefix}.{k}": v for k, v in self.parameters().items()}

    def head_param_names(self, prefix: str = "nima") -> set:
        return {f"{prefix}.head.weights", f"{prefix}.head.bias"}

    def graph(self, x, prefix: str = "nima", trainable: bool = True) -> Expression:
        """Rating-mass expression for image ``x``.

        Trainable graphs route parameters through named leaves (bind with
        ``bindings``); frozen graphs bake the current values in as
        constants, so no gradient ever reaches them.
        """
        # centre [0,1] pixels so the first convolution sees zero-mean input
        h = ad.sub(ad.lift(x), ad.const(0.5))
        for i, layer in enumerate(self.backbone):
            if trainable:
                w = ad.param(f"{prefix}.backbone.{i}.weights")
                b = ad.param(f"{prefix}.backbone.{i}.bias")
            else:
                w = ad.const(layer.weights.data)
                b = ad.const(layer.bias.data)
            h = conv2d(h, layer, weights=w, bias=b)
            h = leaky_relu(h, self.config.leaky_slope)
        pooled = global_average_pool(h)
        if trainable:
            hw = ad.param(f"{prefix}.head.weights")
            hb = ad.param(f"{prefix}.head.bias")
        else:
            hw = ad.const(self.head_weights.data)
            hb = ad.const(self.head_bias.data)
        return softmax(fully_connected(pooled, hw, hb))

    def predict(self, image) -> RatingDistribution:
        image = np.asarray(image, dtype=np.float64)
        expr = self.graph(ad.inp("x"), trainable=False)
        probs = ad.evaluate(expr, {"x": image}).data
        return RatingDistribution(probs)

    def score(self, image) -> float:
        return nima_score(self.predict(image))

    def copy(self) -> "NimaModel":
        layers = [
            ConvLayer(
                Tensor(l.weights.data.copy()),
                Tensor(l.bias.data.copy()),
                dilation=l.dilation,
                padding_mode=l.padding_mode,
                stride=l.stride,
            )
            for l in self.backbone
        ]
        return NimaModel(
            config=self.config,
            backbone=layers,
            head_weights=Tensor(self.head_weights.data.copy()),
            head_bias=Tensor(self.head_bias.data.copy()),
            frozen=self.frozen,
        )

    def param_bytes(self) -> bytes:
        return b"".join(t.data.tobytes() for _, t in sorted(self.parameters().items()))


def build_tiny_nima(config: NimaConfig | None = None, seed: int = 0) -> NimaModel:
    """Deterministically initialize the small from-scratch predictor."""
    config = config or NimaConfig()
    rng = np.random.default_rng(seed)
    backbone = []
    cin = 3
    for cout in config.channels:
        shape = (config.kernel, config.kernel, cin, cout)
        backbone.append(
            ConvLayer(
                Tensor(init_conv_weights(rng, shape, "fan-in-scaled-gaussian")),
                Tensor(np.zeros(cout)),
                dilation=1,
                padding_mode=config.padding_mode,
                stride=config.stride,
            )
        )
        cin = cout
    head_w = Tensor(init_dense_weights(rng, (cin, config.num_buckets)))
    head_b = Tensor(np.zeros(config.num_buckets))
    return NimaModel(config=config, backbone=backbone, head_weights=head_w, head_bias=head_b)


def penalty_graph(model: NimaModel, x, prefix: str = "nima", trainable: bool = False) -> Expression:
    """Quality penalty expression q(x) = 10 - score(x)."""
    return 10.0 - nima_score(model.graph(x, prefix=prefix, trainable=trainable))


def quality_penalty(image, model: NimaModel) -> float:
    """10 minus the predicted mean score; lies in [0, 9]."""
    image = np.asarray(image, dtype=np.float64)
    _check_image_size(image, model)
    return float(ad.evaluate(penalty_graph(model, ad.inp("x")), {"x": image}).data)


def quality_penalty_with_grad(image, model: NimaModel):
    """Penalty value plus its gradient with respect to every pixel."""
    image = np.asarray(image, dtype=np.float64)
    _check_image_size(image, model)
    expr = penalty_graph(model, ad.inp("x"))
    value, grads, _ = ad.value_and_grad(expr, {"x": image}, wrt=["x"])
    return value, grads["x"]


def _check_image_size(image, model: NimaModel):
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an [H,W,3] image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"image size {image.shape[:2]} out of range")


# ---------------------------------------------------------------------------
# evaluation metrics

@dataclass(frozen=True)
class EvalReport:
    two_class_accuracy: float
    lcc: float
    srcc: float
    mean_emd: float


TWO_CLASS_CUTOFF = 5.0


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = a - a.mean(), b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return float("nan")
    return float((da * db).sum() / denom)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def eval_metrics(predicted, truth) -> EvalReport:
    """Two-class accuracy (cutoff 5), Pearson and Spearman correlation of
    mean scores, and mean order-1 EMD between the distributions.

    Degenerate inputs (zero variance in either score list) leave the
    affected correlation as NaN rather than silently reporting 0.
    """
    if len(predicted) != len(truth):
        raise ValueError(f"list lengths differ: {len(predicted)} vs {len(truth)}")
    if len(predicted) < 2:
        raise ValueError("need at least 2 items to evaluate")
    pred = [as_distribution(p) for p in predicted]
    true = [as_distribution(t) for t in truth]
    mp = np.array([nima_score(p) for p in pred])
    mt = np.array([nima_score(t) for t in true])
    accuracy = float(np.mean((mp > TWO_CLASS_CUTOFF) == (mt > TWO_CLASS_CUTOFF)))
    lcc = _pearson(mp, mt)
    srcc = _pearson(_average_ranks(mp), _average_ranks(mt))
    mean_emd = float(np.mean([emd(p, t, order=1) for p, t in zip(pred, true)]))
    return EvalReport(two_class_accuracy=accuracy, lcc=lcc, srcc=srcc, mean_emd=mean_emd)

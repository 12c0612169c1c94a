"""Training loops for the quality predictor and the enhancer.

Both loops are pure functions of (data, config, seed): examples are
shuffled with a seed-derived permutation each epoch, per-example gradients
inside a batch are averaged in a fixed order, and the input models are
never mutated (training operates on copies).
"""

from __future__ import annotations

import ctypes
import sys
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .enhance import CanConfig, CanModel, build_can, check_min_size, mse_graph
from .optim import OptimizerState, adam_step, lr_schedule, momentum_step
from .quality import NimaConfig, NimaModel, build_tiny_nima, emd_train_loss, penalty_graph


class DivergenceError(RuntimeError):
    pass


_allocator_tuned = False


def _tune_allocator():
    """Keep MB-sized blocks on the heap instead of mmap-ing each one.

    Every training step churns through convolution workspaces well above
    glibc's 128 KiB mmap threshold; the default policy page-faults each
    allocation and costs ~3x wall clock on the hot loop.
    """
    global _allocator_tuned
    if _allocator_tuned or not sys.platform.startswith("linux"):
        return
    _allocator_tuned = True
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except OSError:
        pass


@dataclass
class TrainConfig:
    gamma: float = 1e-4
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    head_learning_rate: float | None = None  # separate head group when set
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    step_budget: int = 20000
    decay_factor: float = 1.0
    decay_period_epochs: int = 10
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.optimizer not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.batch_size < 1 or self.step_budget < 1:
            raise ValueError("batch_size and step_budget must be positive")
        if self.decay_period_epochs < 1:
            raise ValueError("decay_period_epochs must be >= 1")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    @classmethod
    def default_nima(cls) -> "TrainConfig":
        """The desk-scale predictor recipe: adam, light weight decay, slow
        10-epoch exponential decay, batch 64."""
        return cls(optimizer="adam", learning_rate=1e-3, head_learning_rate=1e-3,
                   batch_size=64, step_budget=3000, decay_factor=0.98,
                   decay_period_epochs=10, weight_decay=1e-4)

    @classmethod
    def default_can(cls) -> "TrainConfig":
        """Adam, batch 1; the desk-scale step budget and rate."""
        return cls(optimizer="adam", learning_rate=1e-3, batch_size=1,
                   step_budget=20000)


@dataclass
class NimaEpochRecord:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class CanStepRecord:
    step: int
    fidelity: float
    gamma_q: float
    total: float


def _optimizer_step(config: TrainConfig, params, grads, state, lr):
    if config.weight_decay > 0:
        for name, p in params.items():
            grads[name] = grads[name] + config.weight_decay * p.data
    if config.optimizer == "momentum":
        momentum_step(params, grads, state, lr, mu=config.momentum)
    else:
        adam_step(params, grads, state, lr,
                  beta1=config.beta1, beta2=config.beta2, eps=config.eps)


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _mean_grads(grad_sums, count):
    return {k: v / count for k, v in grad_sums.items()}


def _augmented_view(image, rng):
    """Random crop (5/6 extent), flips, and quarter turns; all preserve the
    rating, which depends only on image statistics."""
    h, w = image.shape[0], image.shape[1]
    ch, cw = max(1, h - h // 6), max(1, w - w // 6)
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    view = image[oy:oy + ch, ox:ox + cw]
    if rng.integers(2):
        view = view[:, ::-1]
    if rng.integers(2):
        view = view[::-1]
    if rng.integers(2):
        view = view.transpose(1, 0, 2)
    return np.ascontiguousarray(view)


def train_nima(dataset, config: TrainConfig, model: NimaModel | None = None,
               augment: bool = True):
    """Fit the rating predictor with the squared-EMD loss.

    ``dataset`` holds (image, RatingDistribution) tuples or objects with
    ``.image``/``.rating``. Returns (trained model, per-epoch history);
    the input ``model`` is copied, never mutated. ``augment`` turns on
    seeded random crops and flips of the training views.
    """
    _tune_allocator()
    examples = [_as_example(e) for e in dataset]
    if not examples:
        raise ValueError("dataset is empty")
    model = model.copy() if model is not None else build_tiny_nima(NimaConfig(), seed=config.seed)
    model.frozen = False

    x = ad.inp("x")
    p_true = ad.inp("p_true")
    loss = emd_train_loss(p_true, model.graph(x, trainable=True))
    params = model.bindings()
    head_names = model.head_param_names()
    state = OptimizerState(kind=config.optimizer)
    head_base = config.head_learning_rate if config.head_learning_rate is not None else config.learning_rate

    history = []
    steps_done = 0
    epoch = 0
    while steps_done < config.step_budget:
        rng = np.random.default_rng((config.seed, epoch))
        base = lr_schedule(epoch, config.learning_rate, config.decay_factor,
                           config.decay_period_epochs)
        head = lr_schedule(epoch, head_base, config.decay_factor,
                           config.decay_period_epochs)
        lr = {name: head if name in head_names else base for name in params}

        loss_total = 0.0
        seen = 0
        for batch in _batches(len(examples), config.batch_size, rng):
            if steps_done >= config.step_budget:
                break
            grad_sums = None
            batch_loss = 0.0
            for idx in batch:
                image, rating = examples[idx]
                if augment:
                    image = _augmented_view(image, rng)
                value, grads, _ = ad.value_and_grad(
                    loss, {"x": image, "p_true": rating.probs, **params}
                )
                batch_loss += value
                if grad_sums is None:
                    grad_sums = grads
                else:
                    for k in grad_sums:
                        grad_sums[k] += grads[k]
            if not np.isfinite(batch_loss):
                raise DivergenceError(f"non-finite loss at step {steps_done}")
            count = len(batch)
            _optimizer_step(config, params, _mean_grads(grad_sums, count), state, lr)
            loss_total += batch_loss
            seen += count
            steps_done += 1
        if seen:
            history.append(NimaEpochRecord(epoch=epoch, mean_loss=loss_total / seen, lr=base))
        epoch += 1
    return model, history


def _as_example(e):
    if hasattr(e, "image") and hasattr(e, "rating"):
        return np.asarray(e.image, dtype=np.float64), e.rating
    image, rating = e
    return np.asarray(image, dtype=np.float64), rating


def _as_pair(p):
    if hasattr(p, "input") and hasattr(p, "reference"):
        return (np.asarray(p.input, dtype=np.float64),
                np.asarray(p.reference, dtype=np.float64))
    x, x_r = p
    return np.asarray(x, dtype=np.float64), np.asarray(x_r, dtype=np.float64)


def train_can(pairs, nima: NimaModel | None, config: TrainConfig,
              can_config: CanConfig | None = None, model: CanModel | None = None):
    """Train the enhancer on (input, reference) pairs with the composite loss.

    The quality model must be frozen when gamma > 0; its values are baked
    into the loss graph as constants, so no update can ever reach them.
    Returns (trained model, per-step history of fidelity / gamma*q / total).
    """
    _tune_allocator()
    pair_arrays = [_as_pair(p) for p in pairs]
    if not pair_arrays:
        raise ValueError("no training pairs")
    if config.gamma > 0:
        if nima is None:
            raise ValueError("gamma > 0 requires a quality model")
        if not nima.frozen:
            raise ValueError("the quality model must be frozen for enhancer training")
    can_config = can_config or CanConfig(depth=7)
    for x, x_r in pair_arrays:
        if x.shape != x_r.shape:
            raise ValueError(f"pair shapes differ: {x.shape} vs {x_r.shape}")
        check_min_size(can_config, x.shape[0], x.shape[1])
    model = model.copy() if model is not None else build_can(can_config, seed=config.seed)

    x = ad.inp("x")
    x_r = ad.inp("x_r")
    enhanced = model.graph(x, trainable=True)
    fidelity = mse_graph(enhanced, x_r)
    if config.gamma > 0:
        gamma_q = ad.mul(ad.const(config.gamma), penalty_graph(nima, enhanced, trainable=False))
        total = ad.add(fidelity, gamma_q)
        aux = (fidelity, gamma_q)
    else:
        total = fidelity
        aux = (fidelity,)
    params = model.bindings()
    state = OptimizerState(kind=config.optimizer)

    history = []
    steps_done = 0
    epoch = 0
    while steps_done < config.step_budget:
        rng = np.random.default_rng((config.seed, epoch))
        lr = lr_schedule(epoch, config.learning_rate, config.decay_factor,
                         config.decay_period_epochs)
        for batch in _batches(len(pair_arrays), config.batch_size, rng):
            if steps_done >= config.step_budget:
                break
            grad_sums = None
            fid_sum = 0.0
            gq_sum = 0.0
            total_sum = 0.0
            for idx in batch:
                xv, rv = pair_arrays[idx]
                value, grads, aux_vals = ad.value_and_grad(
                    total, {"x": xv, "x_r": rv, **params}, aux=aux
                )
                total_sum += value
                fid_sum += float(aux_vals[0])
                gq_sum += float(aux_vals[1]) if config.gamma > 0 else 0.0
                if grad_sums is None:
                    grad_sums = grads
                else:
                    for k in grad_sums:
                        grad_sums[k] += grads[k]
            if not np.isfinite(total_sum):
                raise DivergenceError(f"non-finite loss at step {steps_done}")
            count = len(batch)
            _optimizer_step(config, params, _mean_grads(grad_sums, count), state, lr)
            steps_done += 1
            history.append(CanStepRecord(step=steps_done,
                                         fidelity=fid_sum / count,
                                         gamma_q=gq_sum / count,
                                         total=total_sum / count))
        epoch += 1
    return model, history

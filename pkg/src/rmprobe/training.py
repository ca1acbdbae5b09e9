"""Optimizers and the training loop for the five objectives."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import losses
from . import numcore as nc
from .datagen import Dataset
from .encoders import EncoderParams, EncoderSpec, encode_expr, head_expr, init_params, param_vars
from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

METHODS = ("cross_entropy", "triplet_supervised", "triplet_ss", "ntxent", "triplet_entropy")
HEADED_METHODS = ("cross_entropy", "triplet_entropy")
SUPERVISED_METHODS = ("cross_entropy", "triplet_supervised", "triplet_entropy")
OPTIMIZERS = ("sgd_nesterov", "adam")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 0.001
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    method: str
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    margin: float = losses.DEFAULT_MARGIN
    temperature: float = losses.DEFAULT_TEMPERATURE
    aug_strength: float = 0.1
    mask_fraction: float = 0.05

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")


@dataclass
class OptimizerState:
    step: int = 0
    slots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)


@dataclass
class TrainResult:
    params: EncoderParams
    loss_history: list[float]


def _check_shapes(params: dict, grads: dict) -> None:
    if params.keys() != grads.keys():
        raise ShapeError(f"gradient names {sorted(grads)} differ from parameters {sorted(params)}")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ShapeError(f"gradient for {k} has shape {np.shape(grads[k])}, "
                             f"parameter has {np.shape(params[k])}")


def sgd_nesterov_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: OptimizerState, cfg: OptimizerConfig):
    """Nesterov momentum in the lookahead form.

    v <- mu*v - lr*g ;  w <- w + mu*v - lr*g
    """
    _check_shapes(params, grads)
    velocity = state.slots.get("velocity", {})
    new_params, new_velocity = {}, {}
    mu, lr = cfg.momentum, cfg.learning_rate
    for k, w in params.items():
        g = grads[k]
        v = mu * velocity.get(k, np.zeros_like(w)) - lr * g
        new_velocity[k] = v
        new_params[k] = w + mu * v - lr * g
    return new_params, OptimizerState(state.step + 1, {"velocity": new_velocity})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, cfg: OptimizerConfig, t: Optional[int] = None):
    """Bias-corrected Adam. ``t`` defaults to ``state.step + 1``."""
    _check_shapes(params, grads)
    t = state.step + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    m_prev = state.slots.get("m", {})
    v_prev = state.slots.get("v", {})
    b1, b2 = cfg.beta1, cfg.beta2
    new_params, new_m, new_v = {}, {}, {}
    for k, w in params.items():
        g = grads[k]
        m = b1 * m_prev.get(k, np.zeros_like(w)) + (1 - b1) * g
        v = b2 * v_prev.get(k, np.zeros_like(w)) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[k] = w - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_params, OptimizerState(t, {"m": new_m, "v": new_v})


def optimizer_step(params, grads, state, cfg: OptimizerConfig):
    if cfg.kind == "adam":
        return adam_step(params, grads, state, cfg)
    return sgd_nesterov_step(params, grads, state, cfg)


def check_method_spec(method: str, spec: EncoderSpec) -> None:
    if method in HEADED_METHODS and not spec.has_head:
        raise ConfigError(f"method {method} needs an encoder with a classification head")
    if method not in HEADED_METHODS and spec.has_head:
        raise ConfigError(f"method {method} trains a headless encoder; drop num_classes")


def batch_objective(spec: EncoderSpec, cfg: TrainConfig, x: np.ndarray,
                    labels: Optional[np.ndarray], rng: np.random.Generator) -> nc.Expr:
    """Loss expression over the encoder parameters for one minibatch."""
    pv = param_vars(spec)
    n = len(x)
    m = cfg.method
    if m in ("triplet_ss", "ntxent"):
        pair = losses.make_aug_pairs(x, rng, cfg.aug_strength, cfg.mask_fraction)
        z = encode_expr(spec, nc.const(np.vstack([pair.anchors, pair.views])), pv)
        if m == "ntxent":
            return losses.nt_xent_stacked(z, n, cfg.temperature)
        trip = losses.self_supervised_triplets(n, rng)
        return losses.triplet_loss(z, trip, cfg.margin, num_rows=2 * n)

    emb = encode_expr(spec, nc.const(x), pv)
    if m == "cross_entropy":
        return losses.cross_entropy_loss(head_expr(spec, emb, pv), labels, n, spec.num_classes)
    trip = losses.mine_triplets_supervised(labels, rng)
    if m == "triplet_supervised":
        return losses.triplet_loss(emb, trip, cfg.margin, num_rows=n)
    return losses.triplet_entropy_loss(head_expr(spec, emb, pv), emb, labels, trip, cfg.margin,
                                       num_rows=n, num_classes=spec.num_classes)


def train(spec: EncoderSpec, data: Dataset, train_cfg: TrainConfig, opt_cfg: OptimizerConfig,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train from a seeded init; returns final params and the mean loss of each epoch."""
    check_method_spec(train_cfg.method, spec)
    if len(data) < 2:
        raise ValueError("need at least 2 training samples")
    if data.dim != spec.input_dim:
        raise ShapeError(f"data dim {data.dim} != encoder input_dim {spec.input_dim}")
    if train_cfg.method in SUPERVISED_METHODS:
        if data.labels is None:
            raise ValueError(f"method {train_cfg.method} needs labeled data")
        if spec.has_head and data.labels.max() >= spec.num_classes:
            raise ValueError("labels exceed the head's class count")

    params = init_params(spec, train_cfg.seed).arrays
    state = OptimizerState()
    names = list(params)
    history: list[float] = []
    for epoch in range(train_cfg.epochs):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(data))
        rng = np.random.default_rng([train_cfg.seed, epoch, 1])
        batch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            if len(idx) < 2:
                continue
            labels = None if data.labels is None else data.labels[idx]
            try:
                obj = batch_objective(spec, train_cfg, data.inputs[idx], labels, rng)
            except ValueError as e:
                # e.g. a batch without any same-class pair for triplet mining
                log.debug("epoch %d: skipped batch at %d (%s)", epoch, start, e)
                continue
            loss, grads = nc.value_and_grad(obj, params, names)
            params, state = optimizer_step(params, grads, state, opt_cfg)
            batch_losses.append(loss)
        mean_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        history.append(mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
        log.info("epoch %d/%d %s loss %.6f", epoch + 1, train_cfg.epochs, train_cfg.method, mean_loss)
    return TrainResult(EncoderParams(params), history)


def default_spec(method: str, input_dim: int, embedding_dim: int, hidden=(64,),
                 num_classes: Optional[int] = None) -> EncoderSpec:
    """Encoder spec for a method: a head only for the objectives that need logits."""
    head = num_classes if method in HEADED_METHODS else None
    if method in HEADED_METHODS and head is None:
        raise ConfigError(f"method {method} needs num_classes")
    return EncoderSpec(input_dim, tuple(hidden), embedding_dim, head)

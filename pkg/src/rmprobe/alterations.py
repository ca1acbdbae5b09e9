"""Sequences of increasingly altered inputs: white-noise injection and PGD walks.

Noise for sample ``i`` at step ``j`` comes from a generator seeded with
``(master_seed, i, j)``, so every encoder compared under one plan sees the
exact same altered inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import losses
from . import numcore as nc
from .datagen import Dataset
from .encoders import Model, encode_expr, head_expr
from .errors import ConfigError, ShapeError
from .training import HEADED_METHODS, METHODS

PGD_EPSILON = 2 / 255
PGD_ITERATIONS = 30
NOISE_STEPS = 100


@dataclass(frozen=True)
class AlterationPlan:
    kind: str = "noise"
    steps: int = NOISE_STEPS
    epsilon_max: float = 1.0
    epsilon_fgsm: float = PGD_EPSILON
    master_seed: int = 0
    # auxiliary batch construction for the PGD objectives
    margin: float = losses.DEFAULT_MARGIN
    temperature: float = losses.DEFAULT_TEMPERATURE
    aug_strength: float = 0.1
    mask_fraction: float = 0.05

    def __post_init__(self):
        if self.kind not in ("noise", "pgd"):
            raise ConfigError(f"unknown alteration kind {self.kind!r}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.epsilon_fgsm <= 0 or self.epsilon_max < 0:
            raise ConfigError("alteration strengths must be positive")

    @classmethod
    def noise(cls, steps: int = NOISE_STEPS, master_seed: int = 0, epsilon_max: float = 1.0):
        return cls("noise", steps, epsilon_max=epsilon_max, master_seed=master_seed)

    @classmethod
    def pgd(cls, iterations: int = PGD_ITERATIONS, epsilon: float = PGD_EPSILON,
            master_seed: int = 0, **aux):
        return cls("pgd", iterations, epsilon_fgsm=epsilon, master_seed=master_seed, **aux)

    def epsilon(self, j: int) -> float:
        """Noise standard deviation at step j: evenly spaced, 0 at j=0, epsilon_max at j=steps."""
        return self.epsilon_max * j / self.steps if self.steps else 0.0


@dataclass
class AlteredSequence:
    sample_index: int
    inputs: np.ndarray  # (steps + 1, d); row 0 is the unaltered input


def _check_unit_box(x: np.ndarray) -> None:
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        raise ValueError("inputs must lie in [0, 1]")


def noise_vector(plan: AlterationPlan, sample_index: int, j: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng([plan.master_seed, sample_index, j])
    return rng.normal(0.0, 1.0, size=dim) * plan.epsilon(j)


def white_noise_sequence(x, plan: AlterationPlan, sample_index: int) -> AlteredSequence:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("white_noise_sequence takes a single input vector")
    _check_unit_box(x)
    out = np.empty((plan.steps + 1, x.size))
    out[0] = x
    for j in range(1, plan.steps + 1):
        out[j] = np.clip(x + noise_vector(plan, sample_index, j, x.size), 0.0, 1.0)
    return AlteredSequence(sample_index, out)


def noise_sequences(inputs, plan: AlterationPlan, indices=None) -> np.ndarray:
    """Noise walks for a batch, shape (N, steps + 1, d). ``indices`` default to 0..N-1."""
    x = np.asarray(inputs, dtype=np.float64)
    indices = range(len(x)) if indices is None else indices
    return np.stack([white_noise_sequence(row, plan, int(i)).inputs for row, i in zip(x, indices)])


# ---------------------------------------------------------------- PGD


@dataclass
class PGDAux:
    """Objects held fixed across PGD iterations."""

    labels: Optional[np.ndarray] = None
    positives: Optional[np.ndarray] = None
    negatives: Optional[np.ndarray] = None
    views: Optional[np.ndarray] = None


def make_pgd_aux(loss_kind: str, dataset: Dataset, plan: AlterationPlan) -> PGDAux:
    """Labels, mined (positive, negative) inputs or augmented views, seeded by the plan."""
    if loss_kind not in METHODS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    rng = np.random.default_rng([plan.master_seed, 0x5047])
    x = dataset.inputs
    if loss_kind in ("cross_entropy", "triplet_supervised", "triplet_entropy") and dataset.labels is None:
        raise ConfigError(f"PGD with {loss_kind} needs labels")
    if loss_kind == "cross_entropy":
        return PGDAux(labels=dataset.labels)
    if loss_kind in ("triplet_supervised", "triplet_entropy"):
        trip = losses.mine_triplets_supervised(dataset.labels, rng)
        if len(trip) != len(x):
            raise ValueError("every sample needs a same-class partner for triplet PGD")
        return PGDAux(labels=dataset.labels, positives=x[trip.positive], negatives=x[trip.negative])
    views = losses.make_aug_pairs(x, rng, plan.aug_strength, plan.mask_fraction).views
    if loss_kind == "ntxent":
        return PGDAux(views=views)
    trip = losses.self_supervised_triplets(len(x), rng)
    return PGDAux(positives=views, negatives=views[trip.negative - len(x)])


def _pgd_objective(model: Model, loss_kind: str, aux: PGDAux, plan: AlterationPlan,
                   n: int, x: nc.Expr) -> nc.Expr:
    spec = model.spec
    pv = {k: nc.const(v) for k, v in model.params.arrays.items()}
    if loss_kind == "ntxent":
        if aux.views is None or len(aux.views) != n:
            raise ShapeError("NT-Xent PGD needs one augmented view per input")
        view_emb = model.encode(aux.views)
        top = np.vstack([np.eye(n), np.zeros((n, n))])
        bottom = np.vstack([np.zeros((n, n)), np.eye(n)])
        z = nc.const(top) @ encode_expr(spec, x, pv) + nc.const(bottom @ view_emb)
        return losses.nt_xent_stacked(z, n, plan.temperature)

    emb = encode_expr(spec, x, pv)
    terms = []
    if loss_kind in ("cross_entropy", "triplet_entropy"):
        terms.append(losses.cross_entropy_loss(head_expr(spec, emb, pv), aux.labels, n, spec.num_classes))
    if loss_kind in ("triplet_supervised", "triplet_ss", "triplet_entropy"):
        if aux.positives is None or aux.negatives is None:
            raise ShapeError("triplet PGD needs fixed positives and negatives")
        p = nc.const(model.encode(aux.positives))
        q = nc.const(model.encode(aux.negatives))
        gap = nc.sqnorm(emb - p, axis=1) - nc.sqnorm(emb - q, axis=1) + plan.margin
        terms.append(nc.mean(nc.max0(gap)))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _batched(a, ndim: int):
    if a is None:
        return None
    return np.atleast_1d(a) if ndim == 1 else np.atleast_2d(a)


def pgd_sequence(x, aux: PGDAux, model: Model, loss_kind: str, plan: AlterationPlan) -> np.ndarray:
    """Iterated signed-gradient ascent on the training loss w.r.t. the input.

    ``x`` is one vector (returns (steps+1, d)) or a batch (returns (N, steps+1, d)).
    Each step is x <- clip01(x + eps * sign(grad)); sign(0) = 0.
    """
    if loss_kind not in METHODS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}")
    if loss_kind in HEADED_METHODS and not model.spec.has_head:
        raise ConfigError(f"{loss_kind} PGD needs a model with a classification head")
    x0 = np.asarray(x, dtype=np.float64)
    single = x0.ndim == 1
    batch = x0[None, :] if single else x0
    if batch.ndim != 2 or batch.shape[1] != model.spec.input_dim:
        raise ShapeError(f"input shape {x0.shape} does not fit input_dim={model.spec.input_dim}")
    _check_unit_box(batch)
    n = len(batch)

    if single:
        aux = PGDAux(_batched(aux.labels, 1), _batched(aux.positives, 2),
                     _batched(aux.negatives, 2), _batched(aux.views, 2))
    xv = nc.var("x")
    objective = _pgd_objective(model, loss_kind, aux, plan, n, xv)
    out = np.empty((n, plan.steps + 1, batch.shape[1]))
    out[:, 0] = batch
    cur = batch
    for j in range(1, plan.steps + 1):
        g = nc.gradient(objective, {"x": cur}, "x")
        cur = np.clip(cur + plan.epsilon_fgsm * np.sign(g), 0.0, 1.0)
        out[:, j] = cur
    return out[0] if single else out


def alter_dataset(model: Model, dataset: Dataset, plan: AlterationPlan,
                  loss_kind: Optional[str] = None) -> np.ndarray:
    """Altered inputs for every sample, shape (N, steps + 1, d)."""
    if plan.kind == "noise":
        return noise_sequences(dataset.inputs, plan)
    if loss_kind is None:
        raise ConfigError("PGD alterations need the model's training objective")
    aux = make_pgd_aux(loss_kind, dataset, plan)
    return pgd_sequence(dataset.inputs, aux, model, loss_kind, plan)

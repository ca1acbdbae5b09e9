"""Manifold characteristics of representation trajectories.

For a trajectory phi_0..phi_J with d(a, b) = |a - b|_2 / sqrt(dim):

* distance moved      D    = 1/J sum_{j>=1} d(phi_0, phi_j)
* origin spikiness    D_RC = 1/J sum_{j>=1} |d(phi_0, phi_j) - d(phi_0, phi_{j-1})| / d(phi_0, phi_j)
* step spikiness      P_RC = 1/J sum_{j>=2} |s_j - s_{j-1}| / s_j,  s_j = d(phi_{j-1}, phi_j)
* RMQM                     = ln(1 + D + 1/D_RC + 1/P_RC)

Terms whose denominator is below ``GUARD`` are skipped (they contribute 0)
and counted. The cohort functions compare directions by default: every
embedding is scaled to unit RMS (L2 norm sqrt(dim)) before distances are taken
(``normalize=False`` measures raw embeddings). P_RC keeps the 1/J prefactor although it sums J-1 terms;
``prc_prefactor="J-1"`` switches to the averaged form.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateError, ShapeError

GUARD = 1e-12
INVERSE_CAP = 1e6


@dataclass(frozen=True)
class AggregateStats:
    mean: float
    std: float
    se: float
    n: int
    grouping: str = "samples"


def aggregate(values: Sequence[float], grouping: str = "samples") -> AggregateStats:
    """Mean, population std and standard error (std / sqrt(n))."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot aggregate an empty sequence")
    std = float(np.std(v))
    return AggregateStats(float(np.mean(v)), std, std / math.sqrt(v.size), int(v.size), grouping)


def _points(traj) -> np.ndarray:
    pts = getattr(traj, "points", traj)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2:
        raise ShapeError(f"trajectory points must be (J+1, dim), got {pts.shape}")
    return pts


def norm_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ShapeError(f"vectors must share one non-empty dimension: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b) / math.sqrt(a.size))


# -------------------------------------------------------------- batched terms
# All helpers take points of shape (N, J+1, dim).


def origin_distances(points: np.ndarray) -> np.ndarray:
    """d(phi_0, phi_j) for j = 0..J, shape (N, J+1)."""
    return np.linalg.norm(points - points[:, :1], axis=-1) / math.sqrt(points.shape[-1])


def step_sizes(points: np.ndarray) -> np.ndarray:
    """s_j = d(phi_{j-1}, phi_j) for j = 1..J, shape (N, J)."""
    return np.linalg.norm(np.diff(points, axis=1), axis=-1) / math.sqrt(points.shape[-1])


def _ratio_terms(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    guarded = den < GUARD
    safe = np.where(guarded, 1.0, den)
    return np.where(guarded, 0.0, np.abs(num / safe)), guarded


def drc_terms(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step D_RC terms for j = 1..J and their guard mask, each (N, J)."""
    d0 = origin_distances(points)
    return _ratio_terms(d0[:, 1:] - d0[:, :-1], d0[:, 1:])


def prc_terms(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step P_RC terms for j = 2..J and their guard mask, each (N, J-1)."""
    s = step_sizes(points)
    return _ratio_terms(s[:, 1:] - s[:, :-1], s[:, 1:])


def _prc_scale(steps: int, prefactor: str) -> float:
    if prefactor == "J":
        return 1.0 / steps
    if prefactor == "J-1":
        return 1.0 / (steps - 1)
    raise ValueError(f"prc prefactor must be 'J' or 'J-1', got {prefactor!r}")


# -------------------------------------------------------------- per trajectory


def distance_moved(traj) -> float:
    pts = _points(traj)
    if len(pts) < 2:
        raise ValueError("distance moved needs J >= 1")
    return float(origin_distances(pts[None])[0, 1:].mean())


def relative_change_origin(traj) -> float:
    pts = _points(traj)
    if len(pts) < 2:
        raise ValueError("D_RC needs J >= 1")
    terms, guarded = drc_terms(pts[None])
    if guarded.all():
        raise DegenerateError("degenerate trajectory: every D_RC term has a zero denominator")
    return float(terms.sum() / terms.shape[1])


def relative_change_prev(traj, prefactor: str = "J") -> float:
    pts = _points(traj)
    steps = len(pts) - 1
    if steps < 2:
        raise ValueError("P_RC needs J >= 2")
    terms, guarded = prc_terms(pts[None])
    if guarded.all():
        raise DegenerateError("degenerate trajectory: every P_RC term has a zero denominator")
    return float(terms.sum() * _prc_scale(steps, prefactor))


def rmqm(D: float, D_RC: float, P_RC: float) -> float:
    """ln(1 + D + 1/D_RC + 1/P_RC) with inverses capped at INVERSE_CAP."""
    if D < 0 or D_RC < 0 or P_RC < 0:
        raise ValueError("RMQM inputs must be non-negative")

    def inv(v: float) -> float:
        return INVERSE_CAP if v == 0 else min(1.0 / v, INVERSE_CAP)

    return math.log(1.0 + D + inv(D_RC) + inv(P_RC))


# -------------------------------------------------------------- cohort


@dataclass
class MetricsRecord:
    D: float
    D_RC: float
    P_RC: float
    RMQM: float
    stats: dict[str, AggregateStats]
    guarded_drc_terms: int
    guarded_prc_terms: int
    degenerate_samples: int
    n_samples: int
    steps: int
    prc_prefactor: str = "J"
    normalized: bool = True
    per_sample: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_dict(self, include_per_sample: bool = False) -> dict:
        out = {
            "D": self.D,
            "D_RC": self.D_RC,
            "P_RC": self.P_RC,
            "RMQM": self.RMQM,
            "stats": {k: asdict(v) for k, v in self.stats.items()},
            "guarded_terms": {"D_RC": self.guarded_drc_terms, "P_RC": self.guarded_prc_terms},
            "degenerate_samples": self.degenerate_samples,
            "n_samples": self.n_samples,
            "J": self.steps,
            "prc_prefactor": self.prc_prefactor,
            "normalized": self.normalized,
        }
        if include_per_sample:
            out["per_sample"] = {
                k: [None if isinstance(x, float) and math.isnan(x) else x for x in v.tolist()]
                for k, v in self.per_sample.items()
            }
        return out


def unit_rows(points: np.ndarray) -> np.ndarray:
    """Scale each embedding (last axis) to unit RMS, i.e. L2 norm sqrt(dim); zero vectors stay zero.

    With this scaling the normalized distance lies in [0, 2] whatever the dimension.
    """
    norms = np.linalg.norm(points, axis=-1, keepdims=True)
    return points * (math.sqrt(points.shape[-1]) / np.maximum(norms, GUARD))


def _load_points(tset, normalize: bool) -> np.ndarray:
    pts = np.asarray(getattr(tset, "points", tset), dtype=np.float64)
    if pts.ndim != 3:
        raise ShapeError(f"expected (N, J+1, dim) points, got {pts.shape}")
    return unit_rows(pts) if normalize else pts


def measure(tset, prefactor: str = "J", normalize: bool = True) -> MetricsRecord:
    """Per-sample and cohort metrics over a TrajectorySet (or an (N, J+1, dim) array).

    Samples whose D_RC or P_RC terms are all guarded are left out of the cohort
    means and reported in ``degenerate_samples``. Cohort RMQM is computed from
    the cohort means of D, D_RC and P_RC.
    """
    pts = _load_points(tset, normalize)
    n, steps1, _ = pts.shape
    steps = steps1 - 1
    if n == 0:
        raise ValueError("empty trajectory set")
    if steps < 2:
        raise ValueError(f"P_RC needs J >= 2, trajectories have J={steps}")
    scale = _prc_scale(steps, prefactor)

    D = origin_distances(pts)[:, 1:].mean(axis=1)
    drc, drc_guard = drc_terms(pts)
    prc, prc_guard = prc_terms(pts)
    D_RC = drc.sum(axis=1) / steps
    P_RC = prc.sum(axis=1) * scale
    ok = ~(drc_guard.all(axis=1) | prc_guard.all(axis=1))
    if not ok.any():
        raise DegenerateError("degenerate trajectory set: no sample has a usable D_RC and P_RC")
    per_rmqm = np.array([rmqm(a, b, c) if good else np.nan
                         for a, b, c, good in zip(D, D_RC, P_RC, ok)])
    stats = {
        "D": aggregate(D[ok]),
        "D_RC": aggregate(D_RC[ok]),
        "P_RC": aggregate(P_RC[ok]),
        "RMQM_per_sample": aggregate(per_rmqm[ok]),
    }
    cohort = (stats["D"].mean, stats["D_RC"].mean, stats["P_RC"].mean)
    return MetricsRecord(
        D=cohort[0], D_RC=cohort[1], P_RC=cohort[2], RMQM=rmqm(*cohort),
        stats=stats,
        guarded_drc_terms=int(drc_guard[ok].sum()),
        guarded_prc_terms=int(prc_guard[ok].sum()),
        degenerate_samples=int((~ok).sum()),
        n_samples=int(n), steps=steps, prc_prefactor=prefactor, normalized=normalize,
        per_sample={"D": D, "D_RC": D_RC, "P_RC": P_RC, "RMQM": per_rmqm, "usable": ok},
    )


def series(tset, normalize: bool = True) -> dict[str, np.ndarray]:
    """Per-step curves averaged over samples: distance to origin and both relative changes.

    Keys map to arrays indexed by j = 0..J; undefined entries (j=0 for the
    relative changes, j=1 for the step change) are NaN.
    """
    pts = _load_points(tset, normalize)
    n, steps1, _ = pts.shape
    sqrt_n = math.sqrt(n)
    d0 = origin_distances(pts)
    drc, _ = drc_terms(pts)
    prc, _ = prc_terms(pts)
    nan1 = np.full(1, np.nan)
    nan2 = np.full(2, np.nan)
    return {
        "j": np.arange(steps1),
        "distance_mean": d0.mean(axis=0),
        "distance_se": d0.std(axis=0) / sqrt_n,
        "drc_mean": np.concatenate([nan1, drc.mean(axis=0)]),
        "drc_se": np.concatenate([nan1, drc.std(axis=0) / sqrt_n]),
        "prc_mean": np.concatenate([nan2, prc.mean(axis=0)])[:steps1],
        "prc_se": np.concatenate([nan2, prc.std(axis=0) / sqrt_n])[:steps1],
    }


def write_series_csv(curves: dict[str, np.ndarray], path: str | os.PathLike) -> None:
    keys = list(curves)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for row in zip(*(curves[k] for k in keys)):
            w.writerow([int(row[0])] + ["" if np.isnan(v) else repr(float(v)) for v in row[1:]])


def write_metrics_json(record: MetricsRecord, path: str | os.PathLike,
                       metadata: Optional[dict] = None, include_per_sample: bool = False) -> dict:
    doc = {"encoder": dict(metadata or {}), **record.to_dict(include_per_sample)}
    doc["alteration"] = doc["encoder"].get("alteration")
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, default=_json_default)
    return doc


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")

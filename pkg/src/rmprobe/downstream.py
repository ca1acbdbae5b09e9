"""1-NN transfer evaluation, accuracy normalization and RMQM correlation reports."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DegenerateError, ShapeError


@dataclass
class EvalResult:
    encoder_id: str
    task_id: str
    raw_accuracy: float
    normalized_accuracy: Optional[float] = None


@dataclass
class EncoderInfo:
    """What the report needs to know about one encoder."""

    encoder_id: str
    rmqm: float
    embedding_dim: int
    method: str = ""
    optimizer: str = ""


@dataclass
class CorrelationReport:
    rmqm_performance: Optional[float]
    dimension_performance: Optional[float]
    dimension_rmqm: Optional[float]
    rows: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def knn1_accuracy(train_embeds, train_labels, test_embeds, test_labels, chunk: int = 256) -> float:
    """Fraction of test points whose nearest reference (Euclidean) shares their label.

    Ties go to the lowest reference index.
    """
    ref = np.asarray(train_embeds, dtype=np.float64)
    qry = np.asarray(test_embeds, dtype=np.float64)
    ref_y = np.asarray(train_labels)
    qry_y = np.asarray(test_labels)
    if ref.ndim != 2 or len(ref) == 0:
        raise ValueError("reference set must be a non-empty (N, dim) array")
    if qry.ndim != 2 or qry.shape[1] != ref.shape[1]:
        raise ShapeError(f"test embeddings {qry.shape} do not match reference dim {ref.shape[1]}")
    if len(ref_y) != len(ref) or len(qry_y) != len(qry):
        raise ShapeError("one label per embedding is required")
    if len(qry) == 0:
        raise ValueError("empty test set")
    hits = 0
    for start in range(0, len(qry), chunk):
        block = qry[start:start + chunk]
        d2 = np.sum((block[:, None, :] - ref[None, :, :]) ** 2, axis=-1)
        # argmin returns the first minimum, i.e. the lowest index on ties
        nearest = np.argmin(d2, axis=1)
        hits += int(np.sum(ref_y[nearest] == qry_y[start:start + chunk]))
    return hits / len(qry)


def normalize_accuracy(results: Sequence[EvalResult]) -> list[EvalResult]:
    """Per-task min-max rescaling over the encoder cohort; a flat task maps to 1.0."""
    by_task: dict[str, list[EvalResult]] = {}
    for r in results:
        by_task.setdefault(r.task_id, []).append(r)
    out = []
    for task, group in by_task.items():
        if len(group) < 2:
            raise ValueError(f"cohort too small: task {task!r} has {len(group)} encoder(s), need >= 2")
        accs = np.array([r.raw_accuracy for r in group])
        lo, hi = accs.min(), accs.max()
        for r, a in zip(group, accs):
            norm = 1.0 if hi == lo else float((a - lo) / (hi - lo))
            out.append(EvalResult(r.encoder_id, r.task_id, r.raw_accuracy, norm))
    return out


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError("pearson needs two equal-length 1-D sequences")
    if len(x) < 2:
        raise ValueError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateError("undefined correlation: zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _safe_pearson(x, y, what: str, warnings: list[str]) -> Optional[float]:
    try:
        return pearson(x, y)
    except (DegenerateError, ValueError) as e:
        warnings.append(f"{what}: {e}")
        return None


def build_report(encoders: Iterable[EncoderInfo], evals: Iterable[EvalResult]) -> CorrelationReport:
    """Join RMQM and 1-NN results on encoder id and correlate them.

    Accuracies are min-max normalized per task over the encoders that have an
    RMQM entry. Encoders missing on either side are dropped with a warning.
    """
    info = {e.encoder_id: e for e in encoders}
    evals = list(evals)
    warnings = []
    eval_ids = {r.encoder_id for r in evals}
    for eid in sorted(set(info) - eval_ids):
        warnings.append(f"encoder {eid} has metrics but no evaluation; excluded")
    for eid in sorted(eval_ids - set(info)):
        warnings.append(f"encoder {eid} has evaluations but no metrics; excluded")
    joined = [r for r in evals if r.encoder_id in info]
    if len({r.encoder_id for r in joined}) < 2:
        raise ValueError("cohort too small: need at least 2 encoders with metrics and evaluations")

    normalized = normalize_accuracy(joined)
    rows = []
    for r in normalized:
        e = info[r.encoder_id]
        rows.append({
            "encoder_id": e.encoder_id, "method": e.method, "dim": e.embedding_dim,
            "optimizer": e.optimizer, "rmqm": e.rmqm, "task": r.task_id,
            "raw_acc": r.raw_accuracy, "norm_acc": r.normalized_accuracy,
        })
    rmqm_v = [row["rmqm"] for row in rows]
    dims = [row["dim"] for row in rows]
    perf = [row["norm_acc"] for row in rows]
    return CorrelationReport(
        rmqm_performance=_safe_pearson(rmqm_v, perf, "rmqm vs performance", warnings),
        dimension_performance=_safe_pearson(dims, perf, "dimension vs performance", warnings),
        dimension_rmqm=_safe_pearson(dims, rmqm_v, "dimension vs rmqm", warnings),
        rows=rows,
        warnings=warnings,
    )


SCATTER_FIELDS = ["encoder_id", "method", "dim", "optimizer", "rmqm", "task", "raw_acc", "norm_acc"]


def write_report(report: CorrelationReport, json_path: str | os.PathLike,
                 scatter_path: Optional[str | os.PathLike] = None) -> None:
    with open(json_path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    if scatter_path is not None:
        with open(scatter_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=SCATTER_FIELDS)
            w.writeheader()
            w.writerows(report.rows)

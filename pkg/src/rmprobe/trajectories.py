"""Representation trajectories and the RMTJ interchange format.

RMTJ layout (little-endian)::

    b"RMTJ" | u32 version=1 | u32 N | u32 J+1 | u32 dim | u32 label_present
    u32 meta_len | meta_len bytes of UTF-8 "key=value\\n" lines
    N x ( [i32 label] | (J+1)*dim float32, row-major )
"""

from __future__ import annotations

import os
import struct
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .alterations import AlterationPlan, alter_dataset
from .datagen import Dataset
from .encoders import Model
from .errors import FormatError, ShapeError

MAGIC = b"RMTJ"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


@dataclass
class Trajectory:
    sample_index: int
    label: Optional[int]
    points: np.ndarray  # (J+1, dim); row 0 is the unaltered representation


@dataclass
class TrajectorySet:
    points: np.ndarray  # (N, J+1, dim) float32
    labels: Optional[np.ndarray] = None
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32)
        if self.points.ndim != 3:
            raise ShapeError(f"points must be (N, J+1, dim), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ShapeError("trajectory points must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int32)
            if self.labels.shape != (self.points.shape[0],):
                raise ShapeError("one label per trajectory is required")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        label = None if self.labels is None else int(self.labels[i])
        return Trajectory(i, label, self.points[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def steps(self) -> int:
        return self.points.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.points.shape[2]


def build_trajectories(model: Model, dataset: Dataset, plan: AlterationPlan,
                       loss_kind: Optional[str] = None,
                       metadata: Optional[dict[str, str]] = None,
                       altered: Optional[np.ndarray] = None) -> TrajectorySet:
    """Alter every sample per ``plan`` and encode each altered input.

    ``altered`` may hold precomputed inputs of shape (N, steps+1, d); noise
    walks do not depend on the model, so one array serves a whole cohort.
    """
    if dataset.dim != model.spec.input_dim:
        raise ShapeError(f"dataset dim {dataset.dim} != model input_dim {model.spec.input_dim}")
    if altered is None:
        altered = alter_dataset(model, dataset, plan, loss_kind)
    elif altered.shape != (len(dataset), plan.steps + 1, dataset.dim):
        raise ShapeError(f"precomputed alterations have shape {altered.shape}, expected "
                         f"{(len(dataset), plan.steps + 1, dataset.dim)}")
    n, steps1, d = altered.shape
    emb = model.encode(altered.reshape(n * steps1, d)).reshape(n, steps1, -1)
    meta = {
        "embedding_dim": str(model.spec.embedding_dim),
        "alteration": plan.kind,
        "J": str(plan.steps),
        "master_seed": str(plan.master_seed),
    }
    if loss_kind:
        meta["method"] = loss_kind
    meta.update(metadata or {})
    return TrajectorySet(emb, dataset.labels, meta)


def _encode_meta(meta: dict[str, str]) -> bytes:
    lines = []
    for k, v in meta.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise ValueError(f"metadata entry {k!r} cannot contain '=' in the key or newlines")
        lines.append(f"{k}={v}\n")
    return "".join(lines).encode("utf-8")


def trajectories_to_bytes(tset: TrajectorySet) -> bytes:
    n, steps1, dim = tset.points.shape
    meta = _encode_meta(tset.metadata)
    has_labels = tset.labels is not None
    parts = [_HEADER.pack(MAGIC, VERSION, n, steps1, dim, int(has_labels), len(meta)), meta]
    rows = tset.points.astype("<f4")
    if not has_labels:
        parts.append(rows.tobytes())
    else:
        for i in range(n):
            parts.append(struct.pack("<i", int(tset.labels[i])))
            parts.append(rows[i].tobytes())
    return b"".join(parts)


def trajectories_from_bytes(buf: bytes) -> TrajectorySet:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated trajectory header: {len(buf)} of {_HEADER.size} bytes")
    _, version, n, steps1, dim, has_labels, meta_len = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"unsupported trajectory file version {version}")
    if has_labels not in (0, 1):
        raise FormatError(f"label_present flag must be 0 or 1, got {has_labels}")
    if steps1 < 1 or dim < 1:
        raise FormatError(f"invalid geometry J+1={steps1}, dim={dim}")
    row_floats = steps1 * dim
    record = 4 * has_labels + 4 * row_floats
    total = n * record
    # a 64-bit reader could not address this payload
    if row_floats > sys.maxsize // 4 or total > sys.maxsize:
        raise FormatError(f"N*(J+1)*dim overflows: {n}*{steps1}*{dim}")
    pos = _HEADER.size
    if len(buf) < pos + meta_len:
        raise FormatError("truncated metadata block")
    try:
        text = bytes(buf[pos:pos + meta_len]).decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError(f"metadata is not UTF-8: {e}") from None
    meta = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"metadata line without '=': {line!r}")
        k, v = line.split("=", 1)
        meta[k] = v
    pos += meta_len
    if len(buf) - pos < total:
        raise FormatError(f"truncated trajectory payload: header claims {n} trajectories "
                          f"({total} bytes), file holds {len(buf) - pos}")
    if len(buf) - pos > total:
        raise FormatError(f"{len(buf) - pos - total} trailing bytes after trajectories")
    if has_labels:
        rec = np.dtype([("label", "<i4"), ("points", "<f4", (steps1, dim))])
        arr = np.frombuffer(buf, dtype=rec, count=n, offset=pos)
        labels, points = arr["label"].copy(), arr["points"].copy()
    else:
        labels = None
        points = np.frombuffer(buf, dtype="<f4", count=n * row_floats, offset=pos).reshape(n, steps1, dim).copy()
    try:
        return TrajectorySet(points, labels, meta)
    except ShapeError as e:
        raise FormatError(str(e)) from None


def write_trajectories(tset: TrajectorySet, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(trajectories_to_bytes(tset))


def read_trajectories(path: str | os.PathLike) -> TrajectorySet:
    with open(path, "rb") as f:
        return trajectories_from_bytes(f.read())

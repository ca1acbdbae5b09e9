"""MLP encoders: spec, init, forward pass, graph construction and RMEN files."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numcore as nc
from .errors import FormatError, ShapeError

MAGIC = b"RMEN"
VERSION = 1


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden_layers: tuple[int, ...] = ()
    embedding_dim: int = 16
    num_classes: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1 or self.embedding_dim < 1:
            raise ValueError("input_dim and embedding_dim must be positive")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be positive")
        if self.num_classes is not None and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 when a head is present")

    @property
    def has_head(self) -> bool:
        return self.num_classes is not None

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer; relu on hidden layers, the embedding layer is linear."""
        widths = [self.input_dim, *self.hidden_layers, self.embedding_dim]
        return list(zip(widths[:-1], widths[1:]))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for k, (fan_in, fan_out) in enumerate(self.layer_dims()):
            shapes[f"W{k}"] = (fan_in, fan_out)
            shapes[f"b{k}"] = (fan_out,)
        if self.has_head:
            shapes["W_head"] = (self.embedding_dim, self.num_classes)
            shapes["b_head"] = (self.num_classes,)
        return shapes


@dataclass
class EncoderParams:
    """Named weight arrays, in layer order (``W0, b0, W1, b1, ..., W_head, b_head``)."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.arrays.items()})

    def check(self, spec: EncoderSpec) -> None:
        expected = spec.param_shapes()
        if list(expected) != list(self.arrays):
            raise ShapeError(f"parameter names {list(self.arrays)} do not match spec {list(expected)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.arrays[name].shape}, spec wants {shape}")


@dataclass
class Model:
    spec: EncoderSpec
    params: EncoderParams

    def encode(self, batch) -> np.ndarray:
        return encode(self.params, self.spec, batch)

    def logits(self, batch) -> np.ndarray:
        return logits(self.params, self.spec, batch)


def init_params(spec: EncoderSpec, seed: int) -> EncoderParams:
    """He-uniform weights with bound sqrt(6 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in spec.param_shapes().items():
        if name.startswith("W"):
            bound = np.sqrt(6.0 / shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return EncoderParams(arrays)


def _as_batch(spec: EncoderSpec, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ShapeError(f"batch shape {x.shape} does not fit input_dim={spec.input_dim}")
    return x


def encode(params: EncoderParams, spec: EncoderSpec, batch) -> np.ndarray:
    """Embedding-layer outputs (the representation), shape (N, embedding_dim)."""
    h = _as_batch(spec, batch)
    last = len(spec.layer_dims()) - 1
    for k in range(last):
        h = np.maximum(h @ params[f"W{k}"] + params[f"b{k}"], 0.0)
    return h @ params[f"W{last}"] + params[f"b{last}"]


def logits(params: EncoderParams, spec: EncoderSpec, batch) -> np.ndarray:
    if not spec.has_head:
        raise ShapeError("encoder has no classification head")
    return encode(params, spec, batch) @ params["W_head"] + params["b_head"]


def param_vars(spec: EncoderSpec) -> dict[str, nc.Expr]:
    return {name: nc.var(name) for name in spec.param_shapes()}


def encode_expr(spec: EncoderSpec, x: nc.Expr, pvars: dict[str, nc.Expr]) -> nc.Expr:
    h = x
    last = len(spec.layer_dims()) - 1
    for k in range(last):
        h = nc.relu(h @ pvars[f"W{k}"] + pvars[f"b{k}"])
    return h @ pvars[f"W{last}"] + pvars[f"b{last}"]


def head_expr(spec: EncoderSpec, embedding: nc.Expr, pvars: dict[str, nc.Expr]) -> nc.Expr:
    if not spec.has_head:
        raise ShapeError("encoder has no classification head")
    return embedding @ pvars["W_head"] + pvars["b_head"]


# ---------------------------------------------------------------- RMEN files


def _encode_header(spec: EncoderSpec) -> bytes:
    hidden = spec.hidden_layers
    return (
        MAGIC
        + struct.pack("<II", VERSION, spec.input_dim)
        + struct.pack(f"<I{len(hidden)}I", len(hidden), *hidden)
        + struct.pack("<II", spec.embedding_dim, spec.num_classes or 0)
    )


def model_to_bytes(model: Model) -> bytes:
    model.params.check(model.spec)
    chunks = [_encode_header(model.spec)]
    for name in model.spec.param_shapes():
        chunks.append(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    return b"".join(chunks)


def model_from_bytes(buf: bytes) -> Model:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated model file: expected {n} bytes of {what} at offset {pos}, "
                              f"only {len(view) - pos} left")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    input_dim, n_hidden = struct.unpack("<II", take(8, "header"))
    if n_hidden > 4096:
        raise FormatError(f"implausible hidden layer count {n_hidden}")
    hidden = struct.unpack(f"<{n_hidden}I", take(4 * n_hidden, "hidden widths"))
    embed, n_classes = struct.unpack("<II", take(8, "header"))
    try:
        spec = EncoderSpec(input_dim, hidden, embed, n_classes or None)
    except ValueError as e:
        raise FormatError(f"invalid encoder spec in header: {e}") from None
    arrays = {}
    for name, shape in spec.param_shapes().items():
        count = int(np.prod(shape))
        raw = take(4 * count, name)
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after parameters")
    return Model(spec, EncoderParams(arrays))


def save_model(model: Model, path: str | os.PathLike) -> None:
    """Write an RMEN file. Parameters are stored as float32."""
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path: str | os.PathLike) -> Model:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())


def float32_params(params: EncoderParams) -> EncoderParams:
    """Round every array to float32 precision, i.e. what a save/load cycle keeps."""
    return EncoderParams({k: v.astype(np.float32).astype(np.float64) for k, v in params.arrays.items()})


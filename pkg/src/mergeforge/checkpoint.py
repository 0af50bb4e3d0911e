"""Checkpoint container, architecture schemas and layer grouping.

Checkpoints are stored in a small binary container (``.mrg``)::

    [u64 little-endian header length N][N bytes UTF-8 JSON header][raw f32 data]

The header maps each tensor name to ``{"dtype": "f32", "shape": [...],
"offset": o, "length": b}`` where offsets are relative to the start of the
data section, plus an optional ``"__meta__"`` string map. Tensors are laid
out back to back in lexicographic name order with no padding.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

META_KEY = "__meta__"
COMPONENTS = ("encoder", "prompt", "decoder", "extra")

_F32 = np.dtype("<f4")


class CheckpointFormatError(ValueError):
    """Raised when a container file does not follow the format.

    ``field`` names the offending header field or tensor.
    """

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class TruncatedCheckpointError(CheckpointFormatError):
    pass


class UnsupportedDtypeError(CheckpointFormatError):
    pass


class DuplicateTensorError(CheckpointFormatError):
    pass


class IncompatibleModelsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TensorRecord:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"{self.name}: shape entries must be >= 1, got {shape}")
        data = np.ascontiguousarray(self.data, dtype=_F32).reshape(-1)
        if data.size != math.prod(shape):
            raise ValueError(
                f"{self.name}: shape {shape} needs {math.prod(shape)} values, got {data.size}"
            )
        data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)


@dataclass(frozen=True)
class ModelParams:
    """An immutable, name-sorted collection of f32 tensors plus string metadata."""

    tensors: Mapping[str, TensorRecord]
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        ordered = {}
        for name in sorted(self.tensors):
            rec = self.tensors[name]
            if rec.name != name:
                raise ValueError(f"tensor key {name!r} holds record named {rec.name!r}")
            ordered[name] = rec
        meta = {str(k): str(v) for k, v in sorted(self.meta.items())}
        object.__setattr__(self, "tensors", ordered)
        object.__setattr__(self, "meta", meta)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None):
        tensors = {}
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=_F32)
            shape = arr.shape if arr.ndim else (1,)
            tensors[name] = TensorRecord(name, shape, arr.reshape(-1))
        return cls(tensors, meta or {})

    @property
    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name].data

    def __len__(self) -> int:
        return len(self.tensors)

    def num_params(self) -> int:
        return sum(r.data.size for r in self.tensors.values())

    def replace(self, arrays: Mapping[str, np.ndarray], meta: Mapping[str, str] | None = None):
        """Return a copy with the given flat arrays swapped in (shapes kept)."""
        tensors = dict(self.tensors)
        for name, arr in arrays.items():
            old = tensors[name]
            tensors[name] = TensorRecord(name, old.shape, arr)
        return ModelParams(tensors, self.meta if meta is None else meta)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        if self.meta != other.meta or list(self.tensors) != list(other.tensors):
            return False
        for name, rec in self.tensors.items():
            o = other.tensors[name]
            if rec.shape != o.shape or rec.data.tobytes() != o.data.tobytes():
                return False
        return True

    __hash__ = None


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


def to_bytes(params: ModelParams) -> bytes:
    header: dict = {META_KEY: dict(params.meta)}
    chunks = []
    offset = 0
    for name, rec in params.tensors.items():
        raw = rec.data.astype(_F32, copy=False).tobytes()
        header[name] = {"dtype": "f32", "shape": list(rec.shape), "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise DuplicateTensorError(f"duplicate key {key!r} in header", field=key)
        out[key] = value
    return out


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def from_bytes(blob: bytes) -> ModelParams:
    if len(blob) < 8:
        raise TruncatedCheckpointError("file shorter than the 8-byte header length", field="header_length")
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise TruncatedCheckpointError(
            f"header length {n} exceeds file size {len(blob)}", field="header_length"
        )
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except UnicodeDecodeError as exc:
        raise CheckpointFormatError(f"header is not valid UTF-8: {exc}", field="header") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}", field="header") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError("header must be a JSON object", field="header")

    meta = header.pop(META_KEY, {})
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise CheckpointFormatError("__meta__ must map strings to strings", field=META_KEY)

    data = memoryview(blob)[8 + n :]
    entries = []
    for name, entry in header.items():
        if not isinstance(entry, dict):
            raise CheckpointFormatError(f"{name}: entry must be an object", field=name)
        missing = {"dtype", "shape", "offset", "length"} - set(entry)
        if missing:
            raise CheckpointFormatError(f"{name}: missing {sorted(missing)}", field=f"{name}.{sorted(missing)[0]}")
        if entry["dtype"] != "f32":
            raise UnsupportedDtypeError(
                f"{name}: unsupported dtype {entry['dtype']!r} (only f32)", field=f"{name}.dtype"
            )
        shape = entry["shape"]
        if not isinstance(shape, list) or not all(_is_int(s) and s >= 1 for s in shape):
            raise CheckpointFormatError(f"{name}: bad shape {shape!r}", field=f"{name}.shape")
        offset, length = entry["offset"], entry["length"]
        if not _is_int(offset) or offset < 0:
            raise CheckpointFormatError(f"{name}: bad offset {offset!r}", field=f"{name}.offset")
        if not _is_int(length) or length != 4 * math.prod(shape):
            raise CheckpointFormatError(
                f"{name}: length {length!r} does not match shape {shape}", field=f"{name}.length"
            )
        entries.append((offset, name, shape, length))

    cursor = 0
    tensors = {}
    for offset, name, shape, length in sorted(entries):
        if offset != cursor:
            raise CheckpointFormatError(f"{name}: offset {offset} leaves a gap or overlap", field=f"{name}.offset")
        if offset + length > len(data):
            raise TruncatedCheckpointError(f"{name}: data section truncated", field=f"{name}.length")
        arr = np.frombuffer(data[offset : offset + length], dtype=_F32).copy()
        tensors[name] = TensorRecord(name, tuple(shape), arr)
        cursor += length
    if cursor != len(data):
        raise CheckpointFormatError(
            f"{len(data) - cursor} trailing bytes after the last tensor", field="data"
        )
    return ModelParams(tensors, meta)


def load_checkpoint(path: str | Path) -> ModelParams:
    return from_bytes(Path(path).read_bytes())


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(params))


# ---------------------------------------------------------------------------
# architecture schema and layer groups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchitectureSchema:
    """Layer counts per component plus the mapping from tensor-name prefixes to layers.

    ``layer_membership`` maps a dotted name prefix to ``(component, index)``.
    For ``"extra"`` the index points into ``extra_groups``; for ``"decoder"``
    transformer layers come first, followed by the conv layers.
    """

    encoder_layers: int
    prompt_layers: int
    decoder_transformer_layers: int
    decoder_conv_layers: int
    extra_groups: tuple[str, ...] = ()
    layer_membership: Mapping[str, tuple[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        for attr in ("encoder_layers", "prompt_layers", "decoder_transformer_layers", "decoder_conv_layers"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be >= 1")
        object.__setattr__(self, "extra_groups", tuple(self.extra_groups))
        membership = {}
        for prefix, (component, index) in self.layer_membership.items():
            if component not in COMPONENTS:
                raise ValueError(f"unknown component {component!r} for {prefix!r}")
            if not 0 <= index < self.component_size(component):
                raise ValueError(f"layer index {index} out of range for {component} ({prefix!r})")
            membership[prefix] = (component, int(index))
        object.__setattr__(self, "layer_membership", membership)

    @property
    def decoder_layers(self) -> int:
        return self.decoder_transformer_layers + self.decoder_conv_layers

    def component_size(self, component: str) -> int:
        return {
            "encoder": self.encoder_layers,
            "prompt": self.prompt_layers,
            "decoder": self.decoder_layers,
            "extra": len(self.extra_groups),
        }[component]

    def locate(self, name: str) -> tuple[str, int]:
        hits = [v for p, v in self.layer_membership.items() if name == p or name.startswith(p + ".")]
        if len(hits) != 1:
            raise IncompatibleModelsError(
                f"tensor {name!r} matches {len(hits)} schema patterns (need exactly 1)"
            )
        return hits[0]

    def to_dict(self) -> dict:
        return {
            "encoder_layers": self.encoder_layers,
            "prompt_layers": self.prompt_layers,
            "decoder_transformer_layers": self.decoder_transformer_layers,
            "decoder_conv_layers": self.decoder_conv_layers,
            "extra_groups": list(self.extra_groups),
            "layer_membership": {p: list(v) for p, v in sorted(self.layer_membership.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchitectureSchema":
        return cls(
            encoder_layers=d["encoder_layers"],
            prompt_layers=d["prompt_layers"],
            decoder_transformer_layers=d["decoder_transformer_layers"],
            decoder_conv_layers=d["decoder_conv_layers"],
            extra_groups=tuple(d.get("extra_groups", ())),
            layer_membership={p: (v[0], v[1]) for p, v in d.get("layer_membership", {}).items()},
        )


@dataclass(frozen=True)
class LayerGroup:
    id: int
    component: str
    layers: tuple[int, ...]
    tensor_names: tuple[str, ...] = ()


def group_counts(schema: ArchitectureSchema, g_enc: int, g_prompt: int, g_dec: int) -> tuple[int, int, int]:
    """Number of encoder, prompt and decoder groups for a granularity triple."""
    for g in (g_enc, g_prompt, g_dec):
        if int(g) != g or g < 1:
            raise ValueError(f"granularity must be an integer >= 1, got {g!r}")
    return (
        math.ceil(schema.encoder_layers / g_enc),
        math.ceil(schema.prompt_layers / g_prompt),
        math.ceil(schema.decoder_layers / g_dec),
    )


def partition_layers(
    schema: ArchitectureSchema,
    g_enc: int,
    g_prompt: int,
    g_dec: int,
    names: Iterable[str] | None = None,
) -> list[LayerGroup]:
    """Split the schema's layers into merge groups of consecutive layers.

    Component groups come first (encoder, prompt, decoder), followed by one
    singleton group per ``schema.extra_groups`` entry. When ``names`` is
    given, each tensor is assigned to the group owning its layer.
    """
    n_enc, n_prompt, n_dec = group_counts(schema, g_enc, g_prompt, g_dec)
    layout = []
    for component, n_layers, g in (
        ("encoder", schema.encoder_layers, g_enc),
        ("prompt", schema.prompt_layers, g_prompt),
        ("decoder", schema.decoder_layers, g_dec),
    ):
        for start in range(0, n_layers, g):
            layout.append((component, tuple(range(start, min(start + g, n_layers)))))
    for i in range(len(schema.extra_groups)):
        layout.append(("extra", (i,)))
    assert len(layout) == n_enc + n_prompt + n_dec + len(schema.extra_groups)

    owner = {}
    for gi, (component, layers) in enumerate(layout):
        for layer in layers:
            owner[(component, layer)] = gi
    members: list[list[str]] = [[] for _ in layout]
    if names is not None:
        for name in sorted(names):
            members[owner[schema.locate(name)]].append(name)
    return [
        LayerGroup(i + 1, component, layers, tuple(members[i]))
        for i, (component, layers) in enumerate(layout)
    ]


def validate_compatible(models: Sequence[ModelParams], schema: ArchitectureSchema | None = None) -> None:
    """Raise ``IncompatibleModelsError`` unless all models share names, shapes and the schema."""
    if len(models) < 2:
        raise ValueError("need at least two models to compare")
    ref = models[0]
    ref_names = set(ref.tensors)
    for i, other in enumerate(models[1:], start=1):
        names = set(other.tensors)
        if names != ref_names:
            diff = sorted(ref_names ^ names)
            raise IncompatibleModelsError(f"model {i} tensor names differ from model 0: {diff}")
        for name in ref.tensors:
            if ref.tensors[name].shape != other.tensors[name].shape:
                raise IncompatibleModelsError(
                    f"model {i} shape mismatch at {name!r}: "
                    f"{list(ref.tensors[name].shape)} vs {list(other.tensors[name].shape)}"
                )
    if schema is not None:
        for name in ref.tensors:
            schema.locate(name)

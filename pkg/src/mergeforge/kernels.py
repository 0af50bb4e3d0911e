"""Merging kernels and group-wise application of a merge configuration.

All kernels take flat per-tensor arrays, accumulate in float64 and return
float64; :func:`apply_config` casts the result back to float32 when it
builds the merged checkpoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import (
    ArchitectureSchema,
    LayerGroup,
    ModelParams,
    partition_layers,
    validate_compatible,
)

METHODS = ("task_arithmetic", "ties", "slerp", "linear")

# |cos| above this counts as (anti-)parallel and SLERP falls back to lerp
SLERP_PARALLEL_EPS = 1e-7


class ConfigError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class GroupMergeSpec:
    """Method and hyperparameters for one layer group.

    Only the fields used by ``method`` are set:

    - ``task_arithmetic``: ``scaling``
    - ``ties``: ``scaling``, ``retain``
    - ``slerp``: ``pair`` (indices into the model pool), ``t``
    - ``linear``: ``weights`` (one per pool model)

    The pool is ``[base, *candidates]``.
    """

    method: str
    scaling: float | None = None
    retain: float | None = None
    pair: tuple[int, int] | None = None
    t: float | None = None
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(
                f"unknown merge method {self.method!r}; supported methods: {', '.join(METHODS)}"
            )
        if self.pair is not None:
            object.__setattr__(self, "pair", tuple(int(i) for i in self.pair))
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        for attr in ("scaling", "retain", "t"):
            v = getattr(self, attr)
            if v is not None:
                object.__setattr__(self, attr, float(v))

    def validate(self, pool_size: int) -> None:
        def in_unit(name, v, open_low=False):
            if v is None:
                raise ConfigError(f"{self.method}: missing {name}")
            if not math.isfinite(v) or v > 1.0 or v < 0.0 or (open_low and v == 0.0):
                bounds = "(0, 1]" if open_low else "[0, 1]"
                raise ConfigError(f"{self.method}: {name}={v} outside {bounds}")

        if self.method in ("task_arithmetic", "ties"):
            in_unit("scaling", self.scaling)
            if pool_size < 2:
                raise ConfigError(f"{self.method} needs at least one candidate model")
        if self.method == "ties":
            in_unit("retain", self.retain, open_low=True)
        if self.method == "slerp":
            in_unit("t", self.t)
            if self.pair is None or len(self.pair) != 2:
                raise ConfigError("slerp: pair must hold two model indices")
            a, b = self.pair
            if a == b or not (0 <= a < pool_size and 0 <= b < pool_size):
                raise ConfigError(f"slerp: invalid pair {self.pair} for a pool of {pool_size}")
        if self.method == "linear":
            if self.weights is None or len(self.weights) != pool_size:
                raise ConfigError(f"linear: need {pool_size} weights, got {self.weights}")
            for w in self.weights:
                in_unit("weight", w)

    def to_dict(self) -> dict:
        d: dict = {"method": self.method}
        for attr in ("scaling", "retain", "t"):
            if getattr(self, attr) is not None:
                d[attr] = getattr(self, attr)
        if self.pair is not None:
            d["pair"] = list(self.pair)
        if self.weights is not None:
            d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GroupMergeSpec":
        unknown = set(d) - {"method", "scaling", "retain", "pair", "t", "weights"}
        if unknown:
            raise ConfigError(f"unknown spec fields {sorted(unknown)}")
        if "method" not in d:
            raise ConfigError("spec without a method")
        return cls(
            method=d["method"],
            scaling=d.get("scaling"),
            retain=d.get("retain"),
            pair=tuple(d["pair"]) if d.get("pair") is not None else None,
            t=d.get("t"),
            weights=tuple(d["weights"]) if d.get("weights") is not None else None,
        )


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def task_vector(fine_tuned: ModelParams, base: ModelParams) -> dict[str, np.ndarray]:
    """Per-tensor difference ``fine_tuned - base`` in float64."""
    validate_compatible([base, fine_tuned])
    return {
        name: fine_tuned[name].astype(np.float64) - base[name].astype(np.float64)
        for name in base.names
    }


def _stack(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if len(arrays) == 0:
        raise ValueError("need at least one task vector")
    out = np.stack([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])
    return out


def merge_task_arithmetic(base: np.ndarray, taus: Sequence[np.ndarray], scaling: float) -> np.ndarray:
    taus = _stack(taus)
    base = np.asarray(base, dtype=np.float64).reshape(-1)
    if taus.shape[1] != base.size:
        raise ValueError("task vector and base sizes differ")
    return base + scaling * taus.sum(axis=0)


def top_k_count(retain: float, n: int) -> int:
    # the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    return max(1, min(n, math.floor(retain * n + 1e-9)))


def trim_top_k(tau: np.ndarray, retain: float) -> np.ndarray:
    """Zero all but the largest-magnitude entries; ties go to the lower index."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    k = top_k_count(retain, tau.size)
    keep = np.argsort(-np.abs(tau), kind="stable")[:k]
    out = np.zeros_like(tau)
    out[keep] = tau[keep]
    return out


def merge_ties(base: np.ndarray, taus: Sequence[np.ndarray], retain: float, scaling: float) -> np.ndarray:
    """Trim, elect sign, disjoint mean, then scale onto the base."""
    taus = _stack(taus)
    base = np.asarray(base, dtype=np.float64).reshape(-1)
    if taus.shape[1] != base.size:
        raise ValueError("task vector and base sizes differ")
    kept = np.stack([trim_top_k(row, retain) for row in taus])
    consensus = np.sign(kept.sum(axis=0))
    aligned = (np.sign(kept) == consensus) & (consensus != 0)
    count = aligned.sum(axis=0)
    total = np.where(aligned, kept, 0.0).sum(axis=0)
    delta = np.where(count > 0, total / np.maximum(count, 1), 0.0)
    return base + scaling * delta


def merge_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError("slerp inputs differ in size")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("slerp is undefined for a zero-norm tensor")
    if t == 0.0:
        return a.copy()
    if t == 1.0:
        return b.copy()
    cos = float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
    if abs(cos) > 1.0 - SLERP_PARALLEL_EPS:
        return (1.0 - t) * a + t * b
    omega = math.acos(cos)
    so = math.sin(omega)
    return (math.sin((1.0 - t) * omega) / so) * a + (math.sin(t * omega) / so) * b


def merge_linear(models: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    if len(models) != len(weights):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    stack = _stack(models)
    return np.asarray(weights, dtype=np.float64) @ stack


# ---------------------------------------------------------------------------
# configuration application
# ---------------------------------------------------------------------------


def _merge_tensor(spec: GroupMergeSpec, pool: list[np.ndarray], normalize_linear: bool) -> np.ndarray:
    base = pool[0].astype(np.float64)
    if spec.method in ("task_arithmetic", "ties"):
        taus = [p.astype(np.float64) - base for p in pool[1:]]
        if spec.method == "task_arithmetic":
            return merge_task_arithmetic(base, taus, spec.scaling)
        return merge_ties(base, taus, spec.retain, spec.scaling)
    if spec.method == "slerp":
        i, j = spec.pair
        return merge_slerp(pool[i], pool[j], spec.t)
    weights = np.asarray(spec.weights, dtype=np.float64)
    if normalize_linear and weights.sum() > 0:
        weights = weights / weights.sum()
    return merge_linear(pool, weights)


def apply_config(
    base: ModelParams,
    candidates: Sequence[ModelParams],
    config,
    groups: Sequence[LayerGroup],
    normalize_linear: bool = False,
) -> ModelParams:
    """Merge ``[base, *candidates]`` group by group according to ``config``.

    The merged checkpoint keeps the base metadata and adds ``merge_config``
    (canonical config JSON) and ``merge_groups`` (per-group method record).
    """
    specs = list(config.specs)
    if len(specs) != len(groups):
        raise ConfigError(f"config has {len(specs)} group specs but there are {len(groups)} groups")
    pool_models = [base, *candidates]
    if candidates:
        validate_compatible(pool_models)
    for spec in specs:
        spec.validate(len(pool_models))

    covered = [n for g in groups for n in g.tensor_names]
    if sorted(covered) != base.names:
        raise ConfigError("layer groups do not partition the checkpoint's tensors")

    merged = {}
    record = []
    for group, spec in zip(groups, specs):
        for name in group.tensor_names:
            pool = [m[name] for m in pool_models]
            merged[name] = _merge_tensor(spec, pool, normalize_linear).astype(np.float32)
        record.append(
            {"id": group.id, "component": group.component, "layers": list(group.layers), "method": spec.method}
        )
    meta = dict(base.meta)
    meta["merge_config"] = config.to_json()
    meta["merge_groups"] = json.dumps(record, sort_keys=True, separators=(",", ":"))
    if normalize_linear:
        meta["merge_normalize_linear"] = "true"
    return base.replace(merged, meta)


def merge_models(
    base: ModelParams,
    candidates: Sequence[ModelParams],
    config,
    schema: ArchitectureSchema,
    normalize_linear: bool = False,
) -> ModelParams:
    """Partition by the config's granularities, then :func:`apply_config`."""
    groups = partition_layers(schema, config.g_enc, config.g_prompt, config.g_dec, base.names)
    return apply_config(base, candidates, config, groups, normalize_linear)

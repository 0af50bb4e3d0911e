"""Search space over per-group merge configurations.

Feature layout used by the surrogate (fixed length for a given space)::

    [g_enc, g_prompt, g_dec] + encoder slots + prompt slots + decoder slots + extra slots

Each component block has one slot per group at the finest granularity. A
slot is ``[method id, scaling, retain, t, pair id, w_0 .. w_K]``. Unused
fields and slots beyond the realized group count are ``-1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from itertools import permutations
from typing import Mapping, Sequence

import numpy as np

from .checkpoint import ArchitectureSchema, group_counts
from .kernels import METHODS, ConfigError, GroupMergeSpec

INACTIVE = -1.0
MUTATION_SIGMA = 0.2
MIN_RETAIN = 1e-6

# slot field offsets
_METHOD, _SCALING, _RETAIN, _T, _PAIR, _W0 = range(6)


@dataclass(frozen=True)
class MergeConfig:
    g_enc: int
    g_prompt: int
    g_dec: int
    specs: tuple[GroupMergeSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))

    @property
    def granularity(self) -> tuple[int, int, int]:
        return (self.g_enc, self.g_prompt, self.g_dec)

    def to_dict(self) -> dict:
        return {
            "g_enc": self.g_enc,
            "g_prompt": self.g_prompt,
            "g_dec": self.g_dec,
            "specs": [s.to_dict() for s in self.specs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergeConfig":
        try:
            return cls(
                int(d["g_enc"]), int(d["g_prompt"]), int(d["g_dec"]),
                tuple(GroupMergeSpec.from_dict(s) for s in d["specs"]),
            )
        except KeyError as exc:
            raise ConfigError(f"merge config missing field {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "MergeConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SearchSpace:
    schema: ArchitectureSchema
    num_candidates: int
    methods: tuple[str, ...] = METHODS
    granularity_range: tuple[int, int] = (1, 4)

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "granularity_range", tuple(self.granularity_range))
        if not self.methods:
            raise ValueError("search space needs at least one method")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; supported methods: {', '.join(METHODS)}")
        if self.num_candidates < 1:
            raise ValueError("need at least one candidate model")
        lo, hi = self.granularity_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad granularity range {self.granularity_range}")

    @property
    def pool_size(self) -> int:
        return self.num_candidates + 1

    @cached_property
    def pairs(self) -> list[tuple[int, int]]:
        return list(permutations(range(self.pool_size), 2))

    @cached_property
    def block_sizes(self) -> tuple[int, int, int, int]:
        g = self.granularity_range[0]
        enc, prompt, dec = group_counts(self.schema, g, g, g)
        return (enc, prompt, dec, len(self.schema.extra_groups))

    @property
    def slot_width(self) -> int:
        return _W0 + self.pool_size

    @property
    def num_slots(self) -> int:
        return sum(self.block_sizes)

    @property
    def dim(self) -> int:
        return 3 + self.num_slots * self.slot_width

    def counts(self, g_enc: int, g_prompt: int, g_dec: int) -> tuple[int, int, int, int]:
        return (*group_counts(self.schema, g_enc, g_prompt, g_dec), len(self.schema.extra_groups))

    def num_groups(self, g_enc: int, g_prompt: int, g_dec: int) -> int:
        return sum(self.counts(g_enc, g_prompt, g_dec))

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "num_candidates": self.num_candidates,
            "methods": list(self.methods),
            "granularity_range": list(self.granularity_range),
        }


def validate_config(config: MergeConfig, space: SearchSpace) -> None:
    lo, hi = space.granularity_range
    for g in config.granularity:
        if not lo <= g <= hi:
            raise ConfigError(f"granularity {g} outside [{lo}, {hi}]")
    n = space.num_groups(*config.granularity)
    if len(config.specs) != n:
        raise ConfigError(f"granularity {config.granularity} implies {n} groups, config has {len(config.specs)}")
    for spec in config.specs:
        if spec.method not in space.methods:
            raise ConfigError(f"method {spec.method!r} not in the search space {space.methods}")
        spec.validate(space.pool_size)


def _slot_positions(space: SearchSpace, counts: Sequence[int]) -> list[int]:
    """Slot index for each realized group, in group order."""
    out = []
    start = 0
    for block, n in zip(space.block_sizes, counts):
        out.extend(range(start, start + n))
        start += block
    return out


def encode(config: MergeConfig, space: SearchSpace) -> np.ndarray:
    validate_config(config, space)
    vec = np.full(space.dim, INACTIVE)
    vec[:3] = config.granularity
    width = space.slot_width
    for slot, spec in zip(_slot_positions(space, space.counts(*config.granularity)), config.specs):
        s = 3 + slot * width
        vec[s + _METHOD] = METHODS.index(spec.method)
        if spec.scaling is not None:
            vec[s + _SCALING] = spec.scaling
        if spec.retain is not None:
            vec[s + _RETAIN] = spec.retain
        if spec.t is not None:
            vec[s + _T] = spec.t
        if spec.pair is not None:
            vec[s + _PAIR] = space.pairs.index(spec.pair)
        if spec.weights is not None:
            vec[s + _W0 : s + width] = spec.weights
    return vec


def decode(vec: np.ndarray, space: SearchSpace) -> MergeConfig:
    """Inverse of :func:`encode` on the active fields."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (space.dim,):
        raise ConfigError(f"feature vector has shape {vec.shape}, expected ({space.dim},)")
    g = tuple(int(x) for x in vec[:3])
    width = space.slot_width
    specs = []
    for slot in _slot_positions(space, space.counts(*g)):
        s = 3 + slot * width
        method = METHODS[int(vec[s + _METHOD])]
        if method == "task_arithmetic":
            spec = GroupMergeSpec(method, scaling=vec[s + _SCALING])
        elif method == "ties":
            spec = GroupMergeSpec(method, scaling=vec[s + _SCALING], retain=vec[s + _RETAIN])
        elif method == "slerp":
            spec = GroupMergeSpec(method, pair=space.pairs[int(vec[s + _PAIR])], t=vec[s + _T])
        else:
            spec = GroupMergeSpec(method, weights=tuple(vec[s + _W0 : s + width]))
        specs.append(spec)
    return MergeConfig(*g, tuple(specs))


def sample_features(space: SearchSpace, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` random configurations directly in feature form."""
    lo, hi = space.granularity_range
    width = space.slot_width
    out = np.full((n, space.dim), INACTIVE)
    g = rng.integers(lo, hi + 1, size=(n, 3))
    out[:, :3] = g

    method_ids = np.array([METHODS.index(m) for m in space.methods])
    methods = method_ids[rng.integers(len(method_ids), size=(n, space.num_slots))]
    scaling = rng.random((n, space.num_slots))
    retain = 1.0 - rng.random((n, space.num_slots))
    t = rng.random((n, space.num_slots))
    pair = rng.integers(len(space.pairs), size=(n, space.num_slots))
    weights = rng.random((n, space.num_slots, space.pool_size))

    counts = np.array([space.counts(*row) for row in g])  # (n, 4)
    slot_block = np.repeat(np.arange(4), space.block_sizes)
    slot_in_block = np.concatenate([np.arange(b) for b in space.block_sizes])
    active = slot_in_block[None, :] < counts[:, slot_block]  # (n, slots)

    slots = out[:, 3:].reshape(n, space.num_slots, width)
    m = np.where(active, methods, -1)
    slots[..., _METHOD] = m
    uses_scaling = (m == METHODS.index("task_arithmetic")) | (m == METHODS.index("ties"))
    slots[..., _SCALING] = np.where(uses_scaling, scaling, INACTIVE)
    slots[..., _RETAIN] = np.where(m == METHODS.index("ties"), retain, INACTIVE)
    is_slerp = m == METHODS.index("slerp")
    slots[..., _T] = np.where(is_slerp, t, INACTIVE)
    slots[..., _PAIR] = np.where(is_slerp, pair, INACTIVE)
    slots[..., _W0:] = np.where((m == METHODS.index("linear"))[..., None], weights, INACTIVE)
    out[:, 3:] = slots.reshape(n, -1)
    return out


def sample_config(space: SearchSpace, rng: np.random.Generator) -> MergeConfig:
    return decode(sample_features(space, rng, 1)[0], space)


def random_spec(space: SearchSpace, rng: np.random.Generator, method: str | None = None) -> GroupMergeSpec:
    if method is None:
        method = space.methods[rng.integers(len(space.methods))]
    if method == "task_arithmetic":
        return GroupMergeSpec(method, scaling=rng.random())
    if method == "ties":
        return GroupMergeSpec(method, scaling=rng.random(), retain=1.0 - rng.random())
    if method == "slerp":
        return GroupMergeSpec(method, pair=space.pairs[rng.integers(len(space.pairs))], t=rng.random())
    return GroupMergeSpec(method, weights=tuple(rng.random(space.pool_size)))


def _component_slices(space: SearchSpace, config: MergeConfig) -> list[slice]:
    bounds = np.cumsum([0, *space.counts(*config.granularity)])
    return [slice(bounds[i], bounds[i + 1]) for i in range(4)]


def mutate(config: MergeConfig, space: SearchSpace, rng: np.random.Generator) -> MergeConfig:
    """Return a neighbouring configuration.

    Half of the time one active continuous value gets Gaussian noise
    (clipped to its range). Otherwise one group's method is redrawn with
    fresh hyperparameters, or (one time in four) one granularity changes and
    the specs of that component are redrawn for the new grouping.
    """
    specs = list(config.specs)
    if rng.random() < 0.5:
        fields = []
        for i, spec in enumerate(specs):
            for attr in ("scaling", "retain", "t"):
                if getattr(spec, attr) is not None:
                    fields.append((i, attr, None))
            if spec.weights is not None:
                fields.extend((i, "weights", j) for j in range(len(spec.weights)))
        if fields:
            i, attr, j = fields[rng.integers(len(fields))]
            spec = specs[i]
            lo = MIN_RETAIN if attr == "retain" else 0.0
            if j is None:
                new = float(np.clip(getattr(spec, attr) + rng.normal(0.0, MUTATION_SIGMA), lo, 1.0))
                specs[i] = replace(spec, **{attr: new})
            else:
                w = list(spec.weights)
                w[j] = float(np.clip(w[j] + rng.normal(0.0, MUTATION_SIGMA), 0.0, 1.0))
                specs[i] = replace(spec, weights=tuple(w))
            return MergeConfig(*config.granularity, tuple(specs))

    lo, hi = space.granularity_range
    if hi > lo and rng.random() < 0.25:
        comp = int(rng.integers(3))
        g = list(config.granularity)
        choices = [v for v in range(lo, hi + 1) if v != g[comp]]
        g[comp] = int(choices[rng.integers(len(choices))])
        old = _component_slices(space, config)
        n_new = space.counts(*g)[comp]
        fresh = [random_spec(space, rng) for _ in range(n_new)]
        parts = [specs[s] for s in old]
        parts[comp] = fresh
        return MergeConfig(*g, tuple(s for part in parts for s in part))

    i = int(rng.integers(len(specs)))
    others = [m for m in space.methods if m != specs[i].method] or list(space.methods)
    specs[i] = random_spec(space, rng, others[rng.integers(len(others))])
    return MergeConfig(*config.granularity, tuple(specs))


"""Objective backends: a synthetic benchmark with a known optimum, a toy
Dice-scored segmentation benchmark and an external-command protocol.

Every backend exposes ``base``, ``candidates``, ``schema``, ``tasks`` and
``evaluate(merged, trial) -> {task: loss}`` with losses in ``[0, 1]``.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import (
    ArchitectureSchema,
    IncompatibleModelsError,
    ModelParams,
    partition_layers,
    save_checkpoint,
    validate_compatible,
)
from .objectives import dice
from .presets import small_schema


class EvaluatorError(RuntimeError):
    """An evaluation failed; ``stdout``/``stderr`` carry captured output when available."""

    def __init__(self, message: str, stdout: str = "", stderr: str = ""):
        super().__init__(message)
        self.stdout = stdout
        self.stderr = stderr


def _check_compatible(reference: ModelParams, merged: ModelParams) -> None:
    try:
        validate_compatible([reference, merged])
    except IncompatibleModelsError as exc:
        raise EvaluatorError(f"merged model is incompatible: {exc}") from None


def schema_layout(schema: ArchitectureSchema, shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    """One ``<prefix>.weight`` tensor of ``shape`` per schema membership prefix."""
    return {f"{prefix}.weight": shape for prefix in schema.layer_membership}


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------


@dataclass
class SyntheticProblem:
    """Per-task quadratic losses around hidden optima built from the model pool.

    Each optimum is ``sum_i c_i * pool_i`` with ``c`` on the simplex, so the
    linear merge with weights ``c`` reaches it and the best achievable loss
    is 0. ``coefficients[task]`` stores ``c`` as a witness.
    """

    base: ModelParams
    candidates: list[ModelParams]
    schema: ArchitectureSchema
    targets: dict[str, ModelParams]
    coefficients: dict[str, list[float]] = field(default_factory=dict)
    construction: dict = field(default_factory=dict)

    @property
    def tasks(self) -> list[str]:
        return list(self.targets)

    @property
    def analytic_min(self) -> dict[str, float]:
        return {task: 0.0 for task in self.targets}

    def task_vector_coefficients(self, task: str) -> list[float]:
        """``c_k`` with ``optimum = base + sum_k c_k * tau_k``."""
        return list(self.coefficients[task][1:])

    def witness_config(self, task: str, g: tuple[int, int, int] = (1, 1, 1)):
        """All-Linear configuration that reproduces the optimum of ``task``."""
        from .config_space import MergeConfig
        from .kernels import GroupMergeSpec

        n = len(partition_layers(self.schema, *g, self.base.names))
        spec = GroupMergeSpec("linear", weights=tuple(self.coefficients[task]))
        return MergeConfig(*g, (spec,) * n)

    def evaluate(self, merged: ModelParams, trial: int = 0) -> dict[str, float]:
        return evaluate_synthetic(self, merged)

    def to_dict(self) -> dict:
        return {"kind": "synthetic", **self.construction}


def make_synthetic_problem(
    seed: int,
    num_candidates: int = 3,
    num_tasks: int = 1,
    schema: ArchitectureSchema | None = None,
    width: int = 8,
    task_scale: float = 0.5,
    concentration: float = 50.0,
) -> SyntheticProblem:
    if num_candidates < 2 or num_tasks < 1:
        raise ValueError("need at least two candidates and one task")
    schema = schema or small_schema()
    shapes = schema_layout(schema, (width,))
    rng = np.random.default_rng(seed)
    base = {name: rng.normal(0.0, 1.0, size=shape) for name, shape in sorted(shapes.items())}
    cands = [
        {name: base[name] + rng.normal(0.0, task_scale, size=base[name].shape) for name in base}
        for _ in range(num_candidates)
    ]
    pool = [base, *cands]
    targets, coefficients = {}, {}
    for j in range(num_tasks):
        c = rng.dirichlet(np.full(len(pool), concentration))
        task = f"task{j}"
        targets[task] = ModelParams.from_arrays(
            {name: sum(ci * p[name] for ci, p in zip(c, pool)) for name in base}
        )
        coefficients[task] = c.tolist()
    construction = {
        "seed": seed,
        "num_candidates": num_candidates,
        "num_tasks": num_tasks,
        "width": width,
        "task_scale": task_scale,
        "concentration": concentration,
        "schema": schema.to_dict(),
    }
    return SyntheticProblem(
        ModelParams.from_arrays(base),
        [ModelParams.from_arrays(c) for c in cands],
        schema,
        targets,
        coefficients,
        construction,
    )


def synthetic_loss(theta: ModelParams, target: ModelParams) -> float:
    sq = sum(float(np.sum((theta[n].astype(np.float64) - target[n].astype(np.float64)) ** 2)) for n in target.names)
    return min(1.0, max(0.0, sq / target.num_params()))


def evaluate_synthetic(problem: SyntheticProblem, merged: ModelParams) -> dict[str, float]:
    _check_compatible(problem.base, merged)
    return {task: synthetic_loss(merged, target) for task, target in problem.targets.items()}


# ---------------------------------------------------------------------------
# toy segmentation benchmark
# ---------------------------------------------------------------------------


@dataclass
class ToySegmentationProblem:
    """Per-pixel linear scorers on random multi-channel 16x16 images.

    Every layer tensor has shape ``(num_tasks, channels + 1)``; the scorer
    for task ``j`` is the sum over layers of row ``j`` (last entry is the
    bias) and a pixel is foreground when its score is positive.
    """

    base: ModelParams
    candidates: list[ModelParams]
    schema: ArchitectureSchema
    ground_truth: ModelParams
    images: np.ndarray  # (n_images, size, size, channels)
    task_names: list[str]
    construction: dict = field(default_factory=dict)

    @property
    def tasks(self) -> list[str]:
        return list(self.task_names)

    def masks(self, params: ModelParams) -> np.ndarray:
        """Predicted masks, shape ``(tasks, images, size, size)``."""
        w = sum(params.tensors[n].array().astype(np.float64) for n in params.names)
        scores = np.einsum("nhwc,tc->tnhw", self.images, w[:, :-1]) + w[:, -1][:, None, None, None]
        return scores > 0

    def evaluate(self, merged: ModelParams, trial: int = 0) -> dict[str, float]:
        return evaluate_toy_segmentation(self, merged)

    def to_dict(self) -> dict:
        return {"kind": "toy_segmentation", **self.construction}


def make_toy_segmentation_problem(
    seed: int,
    num_tasks: int = 2,
    channels: int = 4,
    num_images: int = 8,
    size: int = 16,
    schema: ArchitectureSchema | None = None,
    base_scale: float = 0.3,
) -> ToySegmentationProblem:
    """Two specialists, each exact on its half of the tasks and equal to the base elsewhere."""
    if num_tasks < 2:
        raise ValueError("need at least two tasks to split between specialists")
    schema = schema or small_schema(2, 1, 1, 1)
    shapes = schema_layout(schema, (num_tasks, channels + 1))
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(num_images, size, size, channels))
    names = sorted(shapes)
    truth = {n: rng.normal(0.0, 1.0, size=shapes[n]) for n in names}
    base = {n: rng.normal(0.0, base_scale, size=shapes[n]) for n in names}
    half = num_tasks // 2
    owned = [np.arange(num_tasks) < half, np.arange(num_tasks) >= half]
    specialists = [
        {n: np.where(mask[:, None], truth[n], base[n]) for n in names} for mask in owned
    ]
    construction = {
        "seed": seed,
        "num_tasks": num_tasks,
        "channels": channels,
        "num_images": num_images,
        "size": size,
        "base_scale": base_scale,
        "schema": schema.to_dict(),
    }
    return ToySegmentationProblem(
        ModelParams.from_arrays(base),
        [ModelParams.from_arrays(s) for s in specialists],
        schema,
        ModelParams.from_arrays(truth),
        images,
        [f"task{j}" for j in range(num_tasks)],
        construction,
    )


def evaluate_toy_segmentation(problem: ToySegmentationProblem, merged: ModelParams) -> dict[str, float]:
    _check_compatible(problem.base, merged)
    pred = problem.masks(merged)
    truth = problem.masks(problem.ground_truth)
    out = {}
    for j, task in enumerate(problem.task_names):
        scores = [dice(p, g) for p, g in zip(pred[j], truth[j])]
        out[task] = 1.0 - float(np.mean(scores))
    return out


def problem_from_dict(d: dict):
    """Rebuild a benchmark problem from its ``to_dict`` construction record."""
    d = dict(d)
    kind = d.pop("kind")
    schema = ArchitectureSchema.from_dict(d.pop("schema"))
    if kind == "synthetic":
        return make_synthetic_problem(schema=schema, **d)
    if kind == "toy_segmentation":
        return make_toy_segmentation_problem(schema=schema, **d)
    raise ValueError(f"unknown problem kind {kind!r}")


# ---------------------------------------------------------------------------
# external command protocol
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExternalEvaluatorSpec:
    """``command`` is a shell-style template with ``{model}`` and optional ``{tasks}``.

    The command must print ``{"scores": {task: score}}`` as its final stdout
    line, with one score in ``[0, 1]`` per task; the loss is ``1 - score``.
    """

    command: str
    tasks: tuple[str, ...]
    timeout: float = 600.0
    failure_policy: str = "abort"

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if "{model}" not in self.command:
            raise ValueError("evaluator command must contain the {model} placeholder")
        if not self.tasks:
            raise ValueError("evaluator needs at least one task")
        if self.failure_policy not in ("abort", "penalize"):
            raise ValueError(f"unknown failure policy {self.failure_policy!r}")

    def argv(self, model_path: str | Path) -> list[str]:
        tasks = ",".join(self.tasks)
        return [
            arg.replace("{model}", str(model_path)).replace("{tasks}", tasks)
            for arg in shlex.split(self.command)
        ]


def parse_scores(stdout: str, tasks: Sequence[str]) -> dict[str, float]:
    lines = [ln for ln in stdout.splitlines() if ln.strip()]
    if not lines:
        raise EvaluatorError("evaluator printed nothing", stdout)
    try:
        payload = json.loads(lines[-1])
    except json.JSONDecodeError as exc:
        raise EvaluatorError(f"final stdout line is not JSON: {exc}", stdout) from None
    scores = payload.get("scores") if isinstance(payload, dict) else None
    if not isinstance(scores, dict):
        raise EvaluatorError('final stdout line lacks a "scores" object', stdout)
    missing, extra = set(tasks) - set(scores), set(scores) - set(tasks)
    if missing or extra:
        raise EvaluatorError(f"task mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}", stdout)
    out = {}
    for task in tasks:
        s = scores[task]
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not math.isfinite(s) or not 0.0 <= s <= 1.0:
            raise EvaluatorError(f"score for {task!r} must be a number in [0, 1], got {s!r}", stdout)
        out[task] = 1.0 - float(s)
    return out


def evaluate_external(spec: ExternalEvaluatorSpec, merged_path: str | Path, cwd: str | Path | None = None) -> dict[str, float]:
    try:
        proc = subprocess.run(
            spec.argv(merged_path), capture_output=True, text=True, timeout=spec.timeout, cwd=cwd
        )
    except subprocess.TimeoutExpired as exc:
        raise EvaluatorError(
            f"evaluator timed out after {spec.timeout}s",
            exc.stdout if isinstance(exc.stdout, str) else "",
            exc.stderr if isinstance(exc.stderr, str) else "",
        ) from None
    except OSError as exc:
        raise EvaluatorError(f"could not start evaluator: {exc}") from None
    if proc.returncode != 0:
        raise EvaluatorError(
            f"evaluator exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}",
            proc.stdout,
            proc.stderr,
        )
    try:
        return parse_scores(proc.stdout, spec.tasks)
    except EvaluatorError as exc:
        exc.stderr = proc.stderr
        raise


@dataclass
class ExternalProblem:
    """Writes each merged model to ``workdir/trial-<index>.mrg`` and runs the command
    from its own ``workdir/trial-<index>/`` directory."""

    base: ModelParams
    candidates: list[ModelParams]
    schema: ArchitectureSchema
    spec: ExternalEvaluatorSpec
    workdir: Path
    keep_files: bool = False

    @property
    def tasks(self) -> list[str]:
        return list(self.spec.tasks)

    def evaluate(self, merged: ModelParams, trial: int = 0) -> dict[str, float]:
        workdir = Path(self.workdir)
        rundir = workdir / f"trial-{trial}"
        rundir.mkdir(parents=True, exist_ok=True)
        path = (workdir / f"trial-{trial}.mrg").resolve()
        save_checkpoint(merged, path)
        try:
            return evaluate_external(self.spec, path, cwd=rundir)
        finally:
            if not self.keep_files:
                path.unlink(missing_ok=True)

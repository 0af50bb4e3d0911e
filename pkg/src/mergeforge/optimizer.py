"""Surrogate-guided search over merge configurations.

The loop follows the usual SMAC recipe: a random initial design, then for
every trial fit a random forest on the evaluated history, score a pool of
random and locally mutated candidates by Expected Improvement, merge the
winner and evaluate it. In multi-task mode each proposal draws fresh
simplex weights and the whole history is rescalarized with them (ParEGO).
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from .config_space import MergeConfig, SearchSpace, decode, encode, mutate, sample_config, sample_features
from .evaluators import EvaluatorError
from .kernels import DegenerateInputError, merge_models
from .objectives import DEFAULT_ALPHA, pareto_front, parego_scalarize, sample_simplex_weights, select_final
from .surrogate import ForestParams, fit

log = logging.getLogger(__name__)

N_RANDOM_CANDIDATES = 1000
N_LOCAL_SEEDS = 10
N_NEIGHBOURS = 10


def expected_improvement(mean, variance, f_best):
    """Closed-form EI for minimization; works on scalars or arrays."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    f_best = np.asarray(f_best, dtype=np.float64)
    if np.any(np.isnan(mean)) or np.any(np.isnan(variance)) or np.any(np.isnan(f_best)):
        raise ValueError("expected_improvement got NaN input")
    if np.any(variance < 0):
        raise ValueError("variance must be non-negative")
    sigma = np.sqrt(variance)
    diff = f_best - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, diff / np.where(sigma > 0, sigma, 1.0), 0.0)
    ei = np.where(sigma > 0, diff * norm.cdf(z) + sigma * norm.pdf(z), np.maximum(diff, 0.0))
    ei = np.maximum(ei, 0.0)
    return float(ei) if ei.ndim == 0 else ei


@dataclass
class TrialRecord:
    index: int
    config: MergeConfig
    features: np.ndarray
    losses: dict[str, float]
    scalar: float
    weights: list[float]
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "config": self.config.to_dict(),
            "losses": dict(self.losses),
            "scalar": self.scalar,
            "weights": list(self.weights),
            "seconds": self.seconds,
        }


@dataclass
class SearchResult:
    best_config: MergeConfig
    best_value: float
    best_index: int
    history: list[TrialRecord]
    pareto_indices: list[int]
    seed: int
    budget: int
    mode: str
    alpha: float = DEFAULT_ALPHA
    tasks: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trials": [t.to_dict() for t in self.history],
            "best": {
                "index": self.best_index,
                "config": self.best_config.to_dict(),
                "value": self.best_value,
                "losses": dict(self.history[self.best_index].losses),
            },
            "pareto": list(self.pareto_indices),
            "seed": self.seed,
            "budget": self.budget,
            "mode": self.mode,
            "alpha": self.alpha,
            "tasks": list(self.tasks),
        }

    @classmethod
    def from_dict(cls, d: dict, space: SearchSpace) -> "SearchResult":
        history = []
        for t in d["trials"]:
            cfg = MergeConfig.from_dict(t["config"])
            history.append(
                TrialRecord(t["index"], cfg, encode(cfg, space), t["losses"], t["scalar"], t["weights"], t["seconds"])
            )
        best = d["best"]
        return cls(
            MergeConfig.from_dict(best["config"]),
            best["value"],
            best["index"],
            history,
            list(d["pareto"]),
            d["seed"],
            d["budget"],
            d["mode"],
            d.get("alpha", DEFAULT_ALPHA),
            list(d.get("tasks", [])),
        )


def propose_next(
    history: Sequence[TrialRecord],
    space: SearchSpace,
    rng: np.random.Generator,
    params: ForestParams | None = None,
    n_init: int = 8,
    scalars: Sequence[float] | None = None,
) -> MergeConfig:
    """Next configuration to evaluate.

    Random while fewer than ``n_init`` trials exist; afterwards the EI
    maximizer over random samples plus neighbours of the best trials. Ties
    go to the lower predicted mean, then to the earlier candidate.
    ``scalars`` overrides the records' stored values (rescalarized history).
    """
    if len(history) < n_init:
        return sample_config(space, rng)
    y = np.asarray([h.scalar for h in history] if scalars is None else scalars, dtype=np.float64)
    X = np.stack([h.features for h in history])
    forest = fit(X, y, params, seed=int(rng.integers(2**31 - 1)))

    random_feats = sample_features(space, rng, N_RANDOM_CANDIDATES)
    local = []
    for i in np.argsort(y, kind="stable")[:N_LOCAL_SEEDS]:
        for _ in range(N_NEIGHBOURS):
            local.append(mutate(history[i].config, space, rng))
    cand = np.vstack([random_feats, *(encode(c, space)[None, :] for c in local)])

    mean, var = forest.predict_many(cand)
    ei = expected_improvement(mean, var, y.min())
    best = np.lexsort((np.arange(len(cand)), mean, -ei))[0]
    if best < N_RANDOM_CANDIDATES:
        return decode(cand[best], space)
    return local[best - N_RANDOM_CANDIDATES]


def _validated_losses(losses: dict, tasks: Sequence[str]) -> dict[str, float]:
    if set(losses) != set(tasks):
        raise EvaluatorError(f"evaluator returned tasks {sorted(losses)}, expected {sorted(tasks)}")
    out = {}
    for task in tasks:
        v = float(losses[task])
        if not math.isfinite(v) or not 0.0 <= v <= 1.0:
            raise EvaluatorError(f"loss for {task!r} outside [0, 1]: {v}")
        out[task] = v
    return out


def run_search(
    problem,
    space: SearchSpace,
    mode: str = "single",
    budget: int = 120,
    seed: int = 0,
    alpha: float = DEFAULT_ALPHA,
    params: ForestParams | None = None,
    workers: int = 1,
    failure_policy: str = "abort",
    target: str | None = None,
    normalize_linear: bool = False,
    n_init: int | None = None,
    callback: Callable[[TrialRecord], None] | None = None,
) -> SearchResult:
    """Run exactly ``budget`` evaluations of merged models on ``problem``.

    With ``workers > 1`` proposals are made in batches from the same history
    snapshot, evaluated concurrently and committed in proposal order, so the
    history depends only on the seed and the worker count.
    """
    if mode not in ("single", "multi"):
        raise ValueError(f"mode must be 'single' or 'multi', got {mode!r}")
    if failure_policy not in ("abort", "penalize"):
        raise ValueError(f"unknown failure policy {failure_policy!r}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    tasks = list(problem.tasks)
    if mode == "single":
        if target is None:
            if len(tasks) != 1:
                raise ValueError(f"single-task mode needs a target among {tasks}")
            target = tasks[0]
        elif target not in tasks:
            raise ValueError(f"unknown target task {target!r}")
    if n_init is None:
        n_init = max(8, math.ceil(budget / 10))
    if budget < n_init:
        raise ValueError(f"budget {budget} is smaller than the initial design ({n_init})")
    workers = max(1, int(workers))

    rng = np.random.default_rng(seed)
    history: list[TrialRecord] = []

    def scalarize(losses, weights):
        if mode == "single":
            return (1.0 + alpha) * losses[target]
        return parego_scalarize([losses[t] for t in tasks], weights, alpha)

    def evaluate(index: int, config: MergeConfig):
        start = time.perf_counter()
        try:
            merged = merge_models(problem.base, problem.candidates, config, problem.schema, normalize_linear)
            losses = _validated_losses(problem.evaluate(merged, index), tasks)
        except (EvaluatorError, DegenerateInputError) as exc:
            if failure_policy == "abort":
                raise
            log.warning("trial %d failed, recording loss 1.0: %s", index, exc)
            losses = {t: 1.0 for t in tasks}
        return losses, time.perf_counter() - start

    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while len(history) < budget:
            batch = []
            for _ in range(min(workers, budget - len(history))):
                if mode == "multi":
                    weights = sample_simplex_weights(len(tasks), rng)
                    scalars = [parego_scalarize([h.losses[t] for t in tasks], weights, alpha) for h in history]
                else:
                    weights = np.ones(1)
                    scalars = None
                batch.append((propose_next(history, space, rng, params, n_init, scalars), weights))
            start = len(history)
            if pool is None:
                outcomes = [evaluate(start, batch[0][0])]
            else:
                outcomes = list(pool.map(evaluate, range(start, start + len(batch)), [c for c, _ in batch]))
            for offset, ((config, weights), (losses, seconds)) in enumerate(zip(batch, outcomes)):
                record = TrialRecord(
                    start + offset, config, encode(config, space), losses,
                    scalarize(losses, weights), [float(w) for w in weights], seconds,
                )
                history.append(record)
                log.info("trial %d: scalar %.5f losses %s", record.index, record.scalar, json.dumps(losses))
                if callback is not None:
                    callback(record)
    finally:
        if pool is not None:
            pool.shutdown()

    front = pareto_front([[h.losses[t] for t in tasks] for h in history])
    if mode == "single":
        scalars = [h.scalar for h in history]
        best_index = int(np.argmin(scalars))
        best_value = scalars[best_index]
    else:
        best_index = front[select_final([[history[i].losses[t] for t in tasks] for i in front])]
        best_value = float(np.mean([history[best_index].losses[t] for t in tasks]))
    return SearchResult(
        history[best_index].config, best_value, best_index, history, front,
        seed, budget, mode, alpha, tasks,
    )

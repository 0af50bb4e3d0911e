"""Command-line entry point: ``merge``, ``search``, ``eval``, ``inspect`` and ``bench``.

Search runs are described by a JSON run config; relative paths inside it
are resolved against the file's directory and command-line flags override
its fields. Exit status is 0 on success, 2 on usage errors (bad flags,
invalid configs, missing files) and 1 when something fails at run time.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import (
    ArchitectureSchema,
    CheckpointFormatError,
    IncompatibleModelsError,
    ModelParams,
    load_checkpoint,
    save_checkpoint,
    validate_compatible,
)
from .config_space import MergeConfig, SearchSpace, validate_config
from .evaluators import (
    EvaluatorError,
    ExternalEvaluatorSpec,
    ExternalProblem,
    make_synthetic_problem,
    make_toy_segmentation_problem,
    problem_from_dict,
)
from .kernels import METHODS, ConfigError, DegenerateInputError, merge_models
from .objectives import DEFAULT_ALPHA
from .optimizer import run_search
from .presets import PRESETS, get_schema
from .surrogate import ForestParams

log = logging.getLogger("mergeforge")


class UsageError(Exception):
    """Bad input from the user; reported with exit status 2."""


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------


def load_schema(value, root: Path | None = None) -> ArchitectureSchema:
    """A preset name, a schema dict, or a path to a JSON file holding one."""
    if isinstance(value, ArchitectureSchema):
        return value
    if isinstance(value, dict):
        return ArchitectureSchema.from_dict(value)
    if isinstance(value, str):
        if value in PRESETS:
            return get_schema(value)
        path = Path(value) if root is None else root / value
        if path.is_file():
            return ArchitectureSchema.from_dict(json.loads(path.read_text()))
        raise UsageError(f"unknown schema {value!r}: not a preset ({', '.join(PRESETS)}) or a JSON file")
    raise UsageError(f"cannot read a schema from {value!r}")


def schema_from_meta(base: ModelParams, fallback: str = "sam-vit-b") -> ArchitectureSchema:
    """Schema recorded in a checkpoint's ``schema`` meta entry, else the fallback preset."""
    raw = base.meta.get("schema")
    if raw is None:
        return get_schema(fallback)
    if raw in PRESETS:
        return get_schema(raw)
    return ArchitectureSchema.from_dict(json.loads(raw))


@dataclass
class RunConfig:
    base: str
    candidates: list[str]
    evaluator: dict
    schema: object = None
    mode: str = "single"
    budget: int = 120
    seed: int = 0
    alpha: float = DEFAULT_ALPHA
    target: str | None = None
    surrogate: dict = field(default_factory=dict)
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    granularity_range: list[int] = field(default_factory=lambda: [1, 4])
    normalize_linear: bool = False
    workers: int | None = None
    output: str = "search-out"

    FIELDS = (
        "base", "candidates", "evaluator", "schema", "mode", "budget", "seed", "alpha", "target",
        "surrogate", "methods", "granularity_range", "normalize_linear", "workers", "output",
    )

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.FIELDS)
        if unknown:
            raise UsageError(f"unknown run config fields: {sorted(unknown)}")
        missing = [k for k in ("base", "candidates", "evaluator") if k not in d]
        if missing:
            raise UsageError(f"run config is missing {missing}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}

    def check(self) -> None:
        if self.mode not in ("single", "multi"):
            raise UsageError(f"mode must be 'single' or 'multi', got {self.mode!r}")
        if not self.alpha > 0:
            raise UsageError("alpha must be positive")
        if int(self.budget) < 1:
            raise UsageError("budget must be positive")
        if not self.candidates:
            raise UsageError("need at least one candidate checkpoint")
        for path in [self.base, *self.candidates]:
            if not Path(path).is_file():
                raise UsageError(f"checkpoint not found: {path}")


def read_run_config(path: Path) -> RunConfig:
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"run config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"run config {path} is not valid JSON: {exc}") from None
    cfg = RunConfig.from_dict(raw)
    root = path.parent
    cfg.base = str(root / cfg.base)
    cfg.candidates = [str(root / c) for c in cfg.candidates]
    cfg.output = str(root / cfg.output)
    ev = dict(cfg.evaluator)
    if ev.get("kind") == "bench" and "problem" in ev:
        ev["problem"] = str(root / ev["problem"])
    if ev.get("kind") == "external" and "workdir" in ev:
        ev["workdir"] = str(root / ev["workdir"])
    cfg.evaluator = ev
    if isinstance(cfg.schema, str) and cfg.schema not in PRESETS:
        cfg.schema = str(root / cfg.schema)
    return cfg


def build_problem(evaluator: dict, base: ModelParams, candidates: list[ModelParams], schema, workdir: Path):
    """Problem object for a run config's ``evaluator`` section."""
    kind = evaluator.get("kind")
    if kind == "bench":
        try:
            record = json.loads(Path(evaluator["problem"]).read_text())
        except (KeyError, FileNotFoundError) as exc:
            raise UsageError(f"bench evaluator needs an existing 'problem' file: {exc}") from None
        problem = problem_from_dict(record)
        problem.base, problem.candidates = base, candidates
        return problem
    if kind == "external":
        try:
            spec = ExternalEvaluatorSpec(
                evaluator["command"],
                tuple(evaluator["tasks"]),
                float(evaluator.get("timeout", 600.0)),
                evaluator.get("failure_policy", "abort"),
            )
        except KeyError as exc:
            raise UsageError(f"external evaluator needs {exc}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        return ExternalProblem(
            base, candidates, schema, spec, Path(evaluator.get("workdir", workdir / "trials")),
            bool(evaluator.get("keep_files", False)),
        )
    raise UsageError(f"evaluator kind must be 'bench' or 'external', got {kind!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _load_models(base: str, candidates: list[str]) -> tuple[ModelParams, list[ModelParams]]:
    for path in [base, *candidates]:
        if not Path(path).is_file():
            raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(base), [load_checkpoint(c) for c in candidates]


def _read_merge_config(path: str) -> MergeConfig:
    try:
        return MergeConfig.from_json(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"merge config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"merge config {path} is not valid JSON: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_merge(args) -> int:
    cfg = _read_merge_config(args.config)
    base, cands = _load_models(args.base, [m for m in args.models.split(",") if m])
    schema = load_schema(args.schema) if args.schema else schema_from_meta(base)
    validate_compatible([base, *cands], schema)
    space = SearchSpace(schema, len(cands))
    try:
        validate_config(cfg, space)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    merged = merge_models(base, cands, cfg, schema, args.normalize_linear)
    save_checkpoint(merged, args.out)
    print(f"wrote {args.out} ({len(merged)} tensors, {len(cfg.specs)} groups)")
    return 0


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for name in ("budget", "seed", "mode", "alpha", "target", "workers"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if args.out is not None:
        cfg.output = args.out
    if args.normalize_linear is not None:
        cfg.normalize_linear = args.normalize_linear
    if cfg.workers is None:
        env = os.environ.get("MERGEFORGE_WORKERS")
        try:
            cfg.workers = int(env) if env else 1
        except ValueError:
            raise UsageError(f"MERGEFORGE_WORKERS must be an integer, got {env!r}") from None
    return cfg


def cmd_search(args) -> int:
    cfg = _apply_overrides(read_run_config(Path(args.run)), args)
    cfg.check()
    base, cands = _load_models(cfg.base, cfg.candidates)
    schema = load_schema(cfg.schema) if cfg.schema is not None else schema_from_meta(base)
    validate_compatible([base, *cands], schema)
    try:
        space = SearchSpace(schema, len(cands), tuple(cfg.methods), tuple(cfg.granularity_range))
        params = ForestParams.from_dict(cfg.surrogate)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg.evaluator, base, cands, schema, out)
    policy = cfg.evaluator.get("failure_policy", "abort")

    def progress(rec):
        log.info("trial %d/%d scalar %.5f", rec.index + 1, cfg.budget, rec.scalar)

    try:
        result = run_search(
            problem, space, cfg.mode, int(cfg.budget), int(cfg.seed), float(cfg.alpha), params,
            int(cfg.workers), policy, cfg.target, bool(cfg.normalize_linear), callback=progress,
        )
    except ValueError as exc:
        if isinstance(exc, (DegenerateInputError, ConfigError)):
            raise
        raise UsageError(str(exc)) from None
    report = {"config": cfg.to_dict(), **result.to_dict()}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    best = merge_models(base, cands, result.best_config, schema, cfg.normalize_linear)
    save_checkpoint(best, out / "best.mrg")
    print(f"best trial {result.best_index}: value {result.best_value:.6f} losses {json.dumps(result.history[result.best_index].losses)}")
    print(f"wrote {out / 'report.json'} and {out / 'best.mrg'}")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.model).is_file():
        raise UsageError(f"checkpoint not found: {args.model}")
    model = load_checkpoint(args.model)
    if args.problem:
        record = json.loads(Path(args.problem).read_text())
        problem = problem_from_dict(record)
        losses = problem.evaluate(model)
    elif args.run:
        cfg = read_run_config(Path(args.run))
        base, cands = _load_models(cfg.base, cfg.candidates)
        schema = load_schema(cfg.schema) if cfg.schema is not None else schema_from_meta(base)
        problem = build_problem(cfg.evaluator, base, cands, schema, Path(cfg.output))
        losses = problem.evaluate(model)
    elif args.command:
        if not args.tasks:
            raise UsageError("--command needs --tasks")
        try:
            spec = ExternalEvaluatorSpec(args.command, tuple(args.tasks.split(",")), args.timeout)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        from .evaluators import evaluate_external

        losses = evaluate_external(spec, Path(args.model).resolve())
    else:
        raise UsageError("eval needs one of --problem, --run or --command")
    print(json.dumps({"losses": losses}, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    params = load_checkpoint(args.checkpoint)
    if args.json:
        print(json.dumps({
            "tensors": [
                {"name": n, "dtype": "f32", "shape": list(params.tensors[n].shape)} for n in params.names
            ],
            "meta": params.meta,
        }, indent=1, sort_keys=True))
        return 0
    width = max([len(n) for n in params.names] + [4])
    print(f"{'name':<{width}}  dtype  {'shape':<18} params")
    for n in params.names:
        shape = "x".join(str(d) for d in params.tensors[n].shape) or "scalar"
        print(f"{n:<{width}}  f32    {shape:<18} {params[n].size}")
    print(f"{len(params)} tensors, {params.num_params()} parameters")
    for key in sorted(params.meta):
        if key in ("merge_config", "merge_groups"):
            continue
        print(f"meta {key}: {params.meta[key]}")
    if "merge_groups" in params.meta:
        cfg = MergeConfig.from_json(params.meta["merge_config"])
        print(f"merge granularity (enc, prompt, dec): {cfg.granularity}")
        for rec, spec in zip(json.loads(params.meta["merge_groups"]), cfg.specs):
            fields = {k: v for k, v in spec.to_dict().items() if k != "method"}
            print(f"  group {rec['id']:>2} {rec['component']:<8} layers {rec['layers']}: {spec.method} {json.dumps(fields)}")
    return 0


def cmd_bench(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    schema = load_schema(args.schema) if args.schema else None
    if args.kind == "synthetic":
        problem = make_synthetic_problem(
            args.seed, args.candidates, args.tasks, schema=schema, width=args.width
        )
    else:
        problem = make_toy_segmentation_problem(args.seed, num_tasks=max(2, args.tasks), schema=schema)
    record = problem.to_dict()
    (out / "problem.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    schema_json = json.dumps(problem.schema.to_dict(), sort_keys=True, separators=(",", ":"))
    save_checkpoint(problem.base.replace({}, {**problem.base.meta, "schema": schema_json}), out / "base.mrg")
    names = []
    for i, cand in enumerate(problem.candidates):
        name = f"candidate-{i}.mrg"
        save_checkpoint(cand.replace({}, {**cand.meta, "schema": schema_json}), out / name)
        names.append(name)
    run = {
        "base": "base.mrg",
        "candidates": names,
        "evaluator": {"kind": "bench", "problem": "problem.json"},
        "mode": "single" if len(problem.tasks) == 1 else "multi",
        "budget": args.budget,
        "seed": args.seed,
        "output": "search-out",
    }
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    print(f"wrote {args.kind} problem with {len(problem.candidates)} candidates and tasks {problem.tasks} to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergeforge", description="Layer-wise checkpoint merging and merge-configuration search."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log every trial")
    sub = parser.add_subparsers(dest="command_name", required=True)

    p = sub.add_parser("merge", help="apply a merge config to checkpoints")
    p.add_argument("--base", required=True)
    p.add_argument("--models", required=True, help="comma-separated candidate checkpoints")
    p.add_argument("--config", required=True, help="merge config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--schema", help="preset name or schema JSON file (default: base meta, else sam-vit-b)")
    p.add_argument("--normalize-linear", action="store_true", help="renormalize Linear weights to sum to 1")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("search", help="run the surrogate-guided search")
    p.add_argument("--run", required=True, help="run config JSON")
    p.add_argument("--out", help="output directory")
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("single", "multi"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--target")
    p.add_argument("--workers", type=int, help="concurrent evaluations (default: $MERGEFORGE_WORKERS or 1)")
    p.add_argument("--normalize-linear", dest="normalize_linear", action="store_true", default=None)
    p.add_argument("--no-normalize-linear", dest="normalize_linear", action="store_false")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="score a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--problem", help="bench problem.json")
    p.add_argument("--run", help="run config JSON whose evaluator is used")
    p.add_argument("--command", help="external evaluator command template with {model}")
    p.add_argument("--tasks", help="comma-separated task names for --command")
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print a checkpoint's tensors and merge metadata")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="write a benchmark problem to disk")
    p.add_argument("--kind", choices=("synthetic", "toy"), default="synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--candidates", type=int, default=3)
    p.add_argument("--tasks", type=int, default=1)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--budget", type=int, default=120)
    p.add_argument("--schema", help="preset name or schema JSON file")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, IncompatibleModelsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EvaluatorError, DegenerateInputError, CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

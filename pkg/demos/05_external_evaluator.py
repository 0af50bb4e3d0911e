"""
Scoring merges with an external command
=======================================

Any program that takes a checkpoint path and prints
{"scores": {task: score}} on its last stdout line can drive the search.
Scores lie in [0, 1] with higher meaning better; the search minimizes
1 - score.
Here a tiny scorer is written to a temporary directory.
"""
import sys
import tempfile
import textwrap
from pathlib import Path

from mergeforge import ExternalEvaluatorSpec, ExternalProblem, SearchSpace, run_search
from mergeforge import make_synthetic_problem

SCORER = textwrap.dedent("""
    import json, sys
    import numpy as np
    from mergeforge import load_checkpoint
    params = load_checkpoint(sys.argv[1])
    flat = np.concatenate([params[n].ravel() for n in params.names])
    score = float(np.exp(-np.mean((flat - 0.1) ** 2)))
    print(json.dumps({"scores": {t: score for t in sys.argv[2].split(",")}}))
""")

work = Path(tempfile.mkdtemp())
(work / "scorer.py").write_text(SCORER)

inner = make_synthetic_problem(seed=0, width=4)
spec = ExternalEvaluatorSpec(f"{sys.executable} {work / 'scorer.py'} {{model}} {{tasks}}", ("shift",), timeout=60.0)
problem = ExternalProblem(inner.base, inner.candidates, inner.schema, spec, work)

space = SearchSpace(problem.schema, len(problem.candidates))
result = run_search(problem, space, "single", budget=20, seed=0, workers=2)
print("losses:", " ".join(f'{h.losses["shift"]:.2e}' for h in result.history))
print("best:", result.best_index, f"{result.best_value:.2e}")

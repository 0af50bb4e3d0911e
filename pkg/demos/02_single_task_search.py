"""
Single-task search on a synthetic problem
=========================================

The synthetic problem has a known optimum: a convex combination of the
pool is the target, so the witness configuration reaches zero loss.
"""
import numpy as np

from mergeforge import SearchSpace, make_synthetic_problem, run_search

problem = make_synthetic_problem(seed=0, num_candidates=3, num_tasks=1)
space = SearchSpace(problem.schema, 3)

print("base loss    :", problem.evaluate(problem.base))
print("analytic min :", problem.analytic_min)

result = run_search(problem, space, "single", budget=120, seed=0, normalize_linear=True)

# running minimum of the raw loss
losses = np.array([h.losses["task0"] for h in result.history])
best_so_far = np.minimum.accumulate(losses)
for n in (8, 30, 60, 120):
    print(f"after {n:3d} trials: {best_so_far[n - 1]:.4f}")

print("best trial:", result.best_index)
print("granularity:", (result.best_config.g_enc, result.best_config.g_prompt, result.best_config.g_dec))
for spec in result.best_config.specs:
    print("  ", spec)

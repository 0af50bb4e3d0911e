"""
Multi-task search with random scalarizations
============================================

Each trial draws fresh weights on the simplex; the whole history is
re-scalarized before the surrogate is refit. The result keeps the
non-dominated set of trials.
"""
import numpy as np

from mergeforge import SearchSpace, make_synthetic_problem, run_search

problem = make_synthetic_problem(seed=1, num_candidates=3, num_tasks=3, width=4,
                                 concentration=1.0)
# a low concentration spreads the task optima apart
space = SearchSpace(problem.schema, 3)
result = run_search(problem, space, "multi", budget=80, seed=0, normalize_linear=True)

F = np.array([[h.losses[t] for t in problem.tasks] for h in result.history])
print("tasks:", problem.tasks)
print("pareto set size:", len(result.pareto_indices))
for i in sorted(result.pareto_indices, key=lambda i: F[i].mean())[:10]:
    print(f"  trial {i:3d}  losses {np.round(F[i], 4)}  mean {F[i].mean():.4f}")
print("selected:", result.best_index, "mean loss", round(result.best_value, 4))

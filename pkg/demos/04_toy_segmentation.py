"""
Toy segmentation merge
======================

Two specialists each segment one kind of blob. A good merge should
handle both; the loss per task is 1 - Dice.
"""
import numpy as np

from mergeforge import SearchSpace, make_toy_segmentation_problem, run_search

problem = make_toy_segmentation_problem(0)
space = SearchSpace(problem.schema, len(problem.candidates))

for i, c in enumerate(problem.candidates):
    print(f"specialist {i}:", problem.evaluate(c))

result = run_search(problem, space, "multi", budget=60, seed=0)
best = result.history[result.best_index]
print("merged      :", {k: round(v, 4) for k, v in best.losses.items()})

spec_mean = min(np.mean(list(problem.evaluate(c).values())) for c in problem.candidates)
print(f"mean loss {result.best_value:.4f} vs best specialist {spec_mean:.4f}")

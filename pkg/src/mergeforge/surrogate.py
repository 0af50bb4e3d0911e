"""Random-forest surrogate with cross-tree variance.

Each tree is fitted on its own bootstrap resample with an rng stream
derived from ``(seed, tree index)``, so the result does not depend on the
order trees are built in. Split search itself is delegated to scikit-learn's
CART regressor (variance-reduction splits at midpoints, random feature
subset per split).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.tree import DecisionTreeRegressor


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 50
    feature_ratio: float = 0.8
    min_leaf: int = 3
    bootstrap: bool = True

    @classmethod
    def from_dict(cls, d) -> "ForestParams":
        return cls(**{k: d[k] for k in ("n_trees", "feature_ratio", "min_leaf", "bootstrap") if k in d})

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "feature_ratio": self.feature_ratio,
            "min_leaf": self.min_leaf,
            "bootstrap": self.bootstrap,
        }


class ConstantTree:
    """A tree with a single leaf. Handy for hand-built forests."""

    def __init__(self, value: float, n_features: int):
        self.value = float(value)
        self.n_features_in_ = n_features

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], self.value)


@dataclass
class Forest:
    trees: list
    n_features: int
    params: ForestParams = field(default_factory=ForestParams)

    def __post_init__(self):
        if not self.trees:
            raise ValueError("a forest needs at least one tree")

    def tree_predictions(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return np.stack([t.predict(X) for t in self.trees])

    def predict_many(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Mean and population variance across trees for each row of ``X``."""
        preds = self.tree_predictions(X)
        mean = preds.mean(axis=0)
        var = preds.var(axis=0)
        # trees that agree up to leaf-mean round-off count as unanimous
        spread = np.ptp(preds, axis=0)
        var = np.where(spread <= 1e-12 * np.maximum(1.0, np.abs(mean)), 0.0, var)
        return mean, var


def fit(X, y, params: ForestParams | None = None, seed: int = 0) -> Forest:
    params = params or ForestParams()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size == 0 or X.shape[0] != y.size:
        raise ValueError(f"need matching non-empty data, got X {X.shape} and y {y.shape}")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    n = y.size
    trees = []
    for i in range(params.n_trees):
        rng = np.random.default_rng([seed, i])
        idx = rng.integers(n, size=n) if params.bootstrap else np.arange(n)
        tree = DecisionTreeRegressor(
            max_features=params.feature_ratio,
            min_samples_leaf=params.min_leaf,
            random_state=int(rng.integers(2**31 - 1)),
        )
        tree.fit(X[idx], y[idx])
        trees.append(tree)
    return Forest(trees, X.shape[1], params)


def predict(forest: Forest, x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict takes a single feature vector")
    mean, var = forest.predict_many(x[None, :])
    return float(mean[0]), float(var[0])

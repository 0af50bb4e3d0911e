"""
Merge kernels on a single tensor
================================

Task arithmetic, TIES, SLERP and linear averaging applied to small
hand-made weight vectors, then a full layer-wise merge of three models.
"""
import numpy as np

from mergeforge import GroupMergeSpec, MergeConfig, merge_models, partition_layers
from mergeforge.kernels import merge_linear, merge_slerp, merge_task_arithmetic, merge_ties
from mergeforge.evaluators import schema_layout
from mergeforge.presets import random_checkpoint, small_schema

base = np.zeros(6)
taus = [np.array([0.5, -0.2, 0.1, 0.0, 0.3, -0.4]),
        np.array([0.4, 0.3, -0.1, 0.2, -0.3, -0.2])]

print("task arithmetic:", merge_task_arithmetic(base, taus, scaling=0.5))
# keep the top half of each task vector, elect signs, average the survivors
print("ties           :", merge_ties(base, taus, retain=0.5, scaling=1.0))

a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
for t in (0.0, 0.5, 1.0):
    print(f"slerp t={t:.1f}    :", np.round(merge_slerp(a, b, t), 4))
print("linear         :", merge_linear([a, b], [0.25, 0.75]))

# layer-wise: one spec per group, groups come from the granularity triple
schema = small_schema()
layout = schema_layout(schema, (4, 4))
rng = np.random.default_rng(0)
models = [random_checkpoint(layout, rng) for _ in range(3)]
groups = partition_layers(schema, 2, 1, 1)
print("\ngroups:", [(g.component, g.layers) for g in groups])

specs = []
for i, g in enumerate(groups):
    if i % 3 == 0:
        specs.append(GroupMergeSpec("task_arithmetic", scaling=0.3))
    elif i % 3 == 1:
        specs.append(GroupMergeSpec("ties", scaling=0.5, retain=0.2))
    else:
        specs.append(GroupMergeSpec("slerp", pair=(1, 2), t=0.5))
config = MergeConfig(2, 1, 1, tuple(specs))
merged = merge_models(models[0], models[1:], config, schema)
print("merged tensors:", len(merged.names))
print("records:", merged.meta["merge_groups"][:120], "...")

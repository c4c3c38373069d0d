"""
Compressing eight residual layers into two
==========================================

Group-wise conversion: every four slots of a deep MLP are matched by one new
block-group, so only the group boundaries need to agree. The target is built
as its own chain, sharing only the stem and head with the guide.
"""

import numpy as np

from partswap import nets
from partswap.conversion import ReplacementMapping, make_schedule, run_conversion
from partswap.data import DatasetSpec, gen_dataset
from partswap.harness import preset_arch
from partswap.similarity import MetricSpec
from partswap.training import AlignConfig, TaskConfig, evaluate, task_train

data = gen_dataset(DatasetSpec("gaussian-blobs", n_train=1500, n_test=500, size=16, separation=1.0))
guide = nets.ModuleGraph(preset_arch("deep-mlp", data, width=32, depth=8), seed=0)
task_train(guide, data, TaskConfig(epochs=8, lr=3e-3))
print("deep guide:", guide.k, "slots, test accuracy", evaluate(guide, *data.test)["accuracy"])

schedule = make_schedule("group-progressive", guide.k, group_size=4)
print("group boundaries", nets.group_boundaries(guide.k, 4), "stages", schedule.stages)
mapping = ReplacementMapping.uniform({"kind": "block-group", "params": {"blocks": 2, "hidden": 64}}, [1, 2])

target, reports = run_conversion(guide, mapping, schedule, MetricSpec("cka"),
                                 AlignConfig(epochs=5, lr=1e-3), data.train[0])
for rep in reports:
    print(f"stage {rep.stage}", {i: round(v, 3) for i, v in rep.final_per_layer.items()})
task_train(target, data, TaskConfig(epochs=5, lr=1e-3))
print("shallow target:", target.k, "slots, test accuracy", evaluate(target, *data.test)["accuracy"])
print("parameters: guide", nets.count_parameters(guide), "target", nets.count_parameters(target))

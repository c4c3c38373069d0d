"""
Turning a small CNN into an MLP, one layer at a time
====================================================

Train a three-layer convolutional network on translated binary patterns,
then swap each convolution for a low-rank linear map. Each stage trains the
replaced layers so that their activations match the CNN's (linear CKA), with
everything downstream still running through the original layers. Compare
against training the same MLP from scratch.
"""

import numpy as np

from partswap import nets
from partswap.conversion import ReplacementMapping, make_schedule, run_conversion
from partswap.data import DatasetSpec, gen_dataset
from partswap.harness import preset_arch, target_arch
from partswap.similarity import MetricSpec
from partswap.training import AlignConfig, TaskConfig, evaluate, recalibrate_bn, task_train

data = gen_dataset(DatasetSpec("translated-patterns", n_train=1500, n_test=500, noise=0.2))
print("inputs", data.input_shape, "classes", data.spec.classes)

# the guide: conv -> BN -> ReLU three times, average pool, linear head
guide = nets.ModuleGraph(preset_arch("toy-cnn", data), seed=0)
task_train(guide, data, TaskConfig(epochs=8, lr=1e-2, warmup=1))
print("guide test accuracy", evaluate(guide, *data.test)["accuracy"])

# every conv slot becomes a rank-32 linear pair acting on the flattened map
lowrank = {"kind": "low-rank-linear-pair", "params": {"rank": 32}}
schedule = make_schedule("progressive", guide.k)
mapping = ReplacementMapping.uniform(lowrank, range(1, guide.k + 1))
print("stages", schedule.stages)

target, reports = run_conversion(guide, mapping, schedule, MetricSpec("cka"),
                                 AlignConfig(epochs=3, lr=1e-3), data.train[0])
for rep in reports:
    losses = ", ".join(f"slot {i}: {v:.3f}" for i, v in rep.final_per_layer.items())
    print(f"stage {rep.stage}  1-CKA  {losses}")

# batch-norm statistics were frozen during alignment; refresh them, then fine-tune
recalibrate_bn(target, data.train[0])
task_train(target, data, TaskConfig(epochs=5, lr=1e-3, warmup=1))
print("converted test accuracy", evaluate(target, *data.test)["accuracy"])

# %%
# Baseline: same architecture, no alignment
naive = nets.ModuleGraph(target_arch(guide, mapping, schedule), seed=7919)
task_train(naive, data, TaskConfig(epochs=5, lr=1e-3, warmup=1))
print("naive test accuracy    ", evaluate(naive, *data.test)["accuracy"])
print("parameters: guide", nets.count_parameters(guide), "target", nets.count_parameters(target))

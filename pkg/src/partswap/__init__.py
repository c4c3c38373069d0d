"""Stage-wise architecture conversion by matching internal representations.

A trained (or untrained) guide network is turned into a different target
architecture one slot at a time: each replacement part is trained so its
activations match the guide's under a similarity measure, then the whole
target is fine-tuned on the task.
"""
from .autodiff import NonFiniteError, Tensor, gradcheck, no_grad
from .conversion import ReplacementMapping, Schedule, make_schedule, run_conversion
from .data import DatasetSpec, gen_dataset
from .harness import ExperimentConfig, RunReport, compare, load_config, run
from .nets import ModuleGraph, PartSpec, build_part, load_checkpoint, save_checkpoint
from .similarity import MetricSpec, dissimilarity, linear_cka, mnn_overlap, ucka
from .training import AlignConfig, TaskConfig, recalibrate_bn, task_train

__version__ = "0.1.0"

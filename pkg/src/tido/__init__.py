"""Source-free task-incremental learning toolkit.

Two stages: foresighted source training that leaves behind a model plus
class-wise Gaussian prototypes, then repeated unsupervised increments
that adapt to shifted unlabeled target streams with one labeled sample
per new private class. Includes a synthetic stream generator, accuracy
and forgetting metrics, generalization-bound diagnostics and a CLI.
"""

from .nn import AdamState, Mlp, adam_step, cross_entropy, mse, softmax_temp
from .prototypes import (
    GaussianPrototype,
    PrototypeSet,
    class_separability_loss,
    fit_prototypes,
    is_ood,
    log_density,
    sample_proxy,
)
from .foresight import ForesightConfig, SourceModel, generate_negatives, train_foresight
from .incremental import (
    AutoEncoder,
    ClassRegistry,
    IncrementConfig,
    IncrementState,
    TargetModel,
    init_guides,
    joint_predict,
    new_state,
    pseudo_label,
    run_increment,
    select_confident,
)
from .metrics import EvalReport, History, bound_report, evaluate, h_distance_proxy

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "AutoEncoder",
    "ClassRegistry",
    "EvalReport",
    "ForesightConfig",
    "GaussianPrototype",
    "History",
    "IncrementConfig",
    "IncrementState",
    "Mlp",
    "PrototypeSet",
    "SourceModel",
    "TargetModel",
    "adam_step",
    "bound_report",
    "class_separability_loss",
    "cross_entropy",
    "evaluate",
    "fit_prototypes",
    "generate_negatives",
    "h_distance_proxy",
    "init_guides",
    "is_ood",
    "joint_predict",
    "log_density",
    "mse",
    "new_state",
    "pseudo_label",
    "run_increment",
    "sample_proxy",
    "select_confident",
    "softmax_temp",
    "train_foresight",
]

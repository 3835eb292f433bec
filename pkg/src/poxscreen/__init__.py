"""Transfer-learning CNN ensembles for four-class skin-lesion screening.

The numeric core (``dataset``, ``probs``, ``metrics``, ``fusion``,
``archive``) imports without TensorFlow; ``backbones``, ``training`` and
``explain`` load Keras on import.
"""

from .dataset import (
    CLASS_NAMES,
    AugmentationConfig,
    DatasetIndex,
    FoldPlan,
    augmentation_stream,
    load_dataset,
    make_fold_plan,
)
from .fusion import FusionInput, combo_search, evaluate_ensemble, fuse_argmax, fuse_matrix
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    accuracy,
    average_over_folds,
    class_counts,
    confusion_from_probs,
    macro_report,
)
from .probs import ProbabilityMatrix, read_probs_csv, write_probs_csv

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES", "AugmentationConfig", "DatasetIndex", "FoldPlan", "augmentation_stream", "load_dataset",
    "make_fold_plan", "FusionInput", "combo_search", "evaluate_ensemble", "fuse_argmax", "fuse_matrix",
    "ConfusionMatrix", "MetricsReport", "accuracy", "average_over_folds", "class_counts", "confusion_from_probs",
    "macro_report", "ProbabilityMatrix", "read_probs_csv", "write_probs_csv",
]

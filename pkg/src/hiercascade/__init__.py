"""Two-level coarse-to-fine cascaded classification toolkit."""
from .backend import (
    ClassifierSpec,
    ConfusionMatrix,
    LabelSpace,
    TrainedModel,
    fit,
    make_table_backend,
    predict,
    predict_proba,
)
from .dataset import Dataset, FoldSplit, Sample, augment, featurize, generate_synthetic, kfold_split
from .estimator import CascadeInputs, estimate_branch, estimate_overall, monte_carlo_cascade
from .evaluation import ExperimentReport, FoldMetrics, aggregate, score
from .routing import (
    HierarchyEnsemble,
    RoutedPrediction,
    classify_bottomup,
    classify_flat,
    classify_oracle,
    classify_topdown,
    route_batch,
)
from .taxonomy import Taxonomy, load_nw45, load_taxonomy

__version__ = "0.1.0"

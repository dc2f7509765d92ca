"""Locally independent ensemble training.

Ensembles of small MLPs trained jointly with a penalty on the squared cosine
similarity of members' input gradients, alongside the usual baselines
(random restarts, bagging, AdaBoost, negative correlation learning, amended
cross-entropy) and the diversity metrics used to compare them.
"""

from .data import Dataset, SplitSpec, gen_2d_gaps, gen_manifold_3d, load_csv, split
from .diversity import cos_indep_err, indep_err_oracle
from .evaluation import MetricsRecord, auc, build_report, ensemble_predict
from .models import MlpParams, forward, init_mlp, input_gradient
from .training import EnsembleConfig, TrainedEnsemble, train_ensemble

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SplitSpec",
    "gen_2d_gaps",
    "gen_manifold_3d",
    "load_csv",
    "split",
    "cos_indep_err",
    "indep_err_oracle",
    "MetricsRecord",
    "auc",
    "build_report",
    "ensemble_predict",
    "MlpParams",
    "forward",
    "init_mlp",
    "input_gradient",
    "EnsembleConfig",
    "TrainedEnsemble",
    "train_ensemble",
]

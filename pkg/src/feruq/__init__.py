"""Uncertainty estimation for crowd-labelled classification with numpy MLPs.

MC-Dropout, MC-DropConnect and deep ensembles over a from-scratch network,
with calibration and entropy metrics, a FER+-style data loader and a
sweep/report harness.
"""

from .data import (
    EMOTIONS,
    Dataset,
    LabelDistribution,
    derive_hard_label,
    label_entropy_report,
    load_ferplus_csv,
    synth_aleatoric,
    write_ferplus_csv,
)
from .estimators import DeepEnsembleClassifier, StochasticMLPClassifier
from .exceptions import (
    DimensionError,
    FeruqError,
    FormatError,
    ParseError,
    TrainingError,
    UsageError,
    ValidationError,
)
from .metrics import (
    CalibrationBins,
    MetricsReport,
    UncertaintyRanking,
    classification_error,
    ece,
    evaluate,
    nll,
    predictive_entropy,
    rank_by_entropy,
    reliability_curve,
    soft_label_divergence,
)
from .nn import ModelConfig, ModelParams, OptimizerState, backward, forward, init_params, softmax, train
from .uncertainty import (
    Ensemble,
    PredictiveSamples,
    ensemble_predict,
    mc_dropconnect_predict,
    mc_dropout_predict,
    train_ensemble,
)

__version__ = "0.1.0"

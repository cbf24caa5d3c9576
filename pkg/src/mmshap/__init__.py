"""Shapley-value explanations for early-fusion multimodal classifiers.

The package bundles a small numpy neural engine, clinical-style preprocessing,
a synthetic cohort generator, evaluation metrics and the attribution machinery
that splits a fused prediction into per-modality and per-input contributions.
"""

from mmshap.attribution import (
    AttributionMatrix,
    AttributionReport,
    AttributionVector,
    BackgroundSet,
    ModalityContribution,
    encoder_attribution_matrix,
    explain_case,
    global_aggregate,
    modality_contribution,
    propagate,
    shapley_exact,
    shapley_sampled,
    value_function,
)
from mmshap.fusion import ModalityPartition, MultimodalModel
from mmshap.nn import ClassWeights, DenseLayer, MLPModel, TrainConfig, class_weights, train

__version__ = "0.1.0"

__all__ = [
    "AttributionMatrix",
    "AttributionReport",
    "AttributionVector",
    "BackgroundSet",
    "ClassWeights",
    "DenseLayer",
    "MLPModel",
    "ModalityContribution",
    "ModalityPartition",
    "MultimodalModel",
    "TrainConfig",
    "class_weights",
    "encoder_attribution_matrix",
    "explain_case",
    "global_aggregate",
    "modality_contribution",
    "propagate",
    "shapley_exact",
    "shapley_sampled",
    "train",
    "value_function",
]

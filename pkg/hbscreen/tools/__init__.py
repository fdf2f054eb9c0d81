"""Pipeline services: signal, features, dataset, gbm, explain, screening, synth."""

from .signal_processing import SignalProcessingService, signal_service
from .feature_extraction import FeatureExtractionService, feature_service
from .dataset_service import DatasetService, dataset_service
from .gbm_regressor import GbmRegressor
from .shap_explainer import TreeShapExplainer
from .anemia_screening import AnemiaScreeningService, screening_service

__all__ = [
    "SignalProcessingService",
    "signal_service",
    "FeatureExtractionService",
    "feature_service",
    "DatasetService",
    "dataset_service",
    "GbmRegressor",
    "TreeShapExplainer",
    "AnemiaScreeningService",
    "screening_service",
]

"""Module-level battery state-of-health estimation from charging curves."""
from .curvefit import IcDvCurve, eval_dv, eval_ic, fit_qv
from .data_model import FeatureTable, QVProfile, SplitSpec, load_dataset, split, standardize_fit
from .errors import NumericalError, SohError, ValidationError
from .featext import ExtractionConfig, build_feature_table, extract_features, find_extrema
from .featsel import select_features
from .infotheory import knn_cmi, knn_mi, normalized_cmi, normalized_mi
from .rvr import RvrConfig, RvrModel, load_model, predict, save_model, train, train_table
from .synthgen import AgingSpec, CellSpec, synth_dataset

__version__ = "0.1.0"

__all__ = [
    "AgingSpec", "CellSpec", "ExtractionConfig", "FeatureTable", "IcDvCurve", "NumericalError",
    "QVProfile", "RvrConfig", "RvrModel", "SohError", "SplitSpec", "ValidationError",
    "build_feature_table", "eval_dv", "eval_ic", "extract_features", "find_extrema", "fit_qv",
    "knn_cmi", "knn_mi", "load_dataset", "load_model", "normalized_cmi", "normalized_mi", "predict",
    "save_model", "select_features", "split", "standardize_fit", "synth_dataset", "train",
    "train_table",
]

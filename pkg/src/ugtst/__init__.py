"""Uncertainty-guided active source-free domain adaptation for slice segmentation."""
from .adapt import run_ugtst
from .metrics import dsc, evaluate_cases, hd95, largest_component
from .segmenter import Segmenter, load_model, save_model
from .select import SelectionConfig, select
from .uncertainty import GAUAScorer, entropy_map, primary_peak_threshold

__version__ = "0.1.0"

__all__ = [
    "GAUAScorer", "Segmenter", "SelectionConfig", "dsc", "entropy_map", "evaluate_cases",
    "hd95", "largest_component", "load_model", "primary_peak_threshold", "run_ugtst",
    "save_model", "select",
]

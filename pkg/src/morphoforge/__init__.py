"""Nanomaterial morphology prediction toolkit.

Screens synthesis parameters with nonparametric tests, fits native tree
ensembles with exact path-dependent SHAP attribution, benchmarks few-shot
LLM prompting against the trees, and scores micrograph quality.
"""

from .data_model import (
    Dataset,
    MorphologyLabel,
    ShapeCategory,
    ShapeSizeCategory,
    SynthesisRecord,
    load_dataset,
    save_dataset,
    split,
)
from .stats import screen_features
from .trees import EnsembleModel, fit_boosted, fit_forest, fit_tree, grid_search_cv
from .attribution import importance_ranking, shap_matrix, tree_shap
from .prompts import FewShotConfig, build_prompt, parse_answer
from .img_metrics import pdi, psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "EnsembleModel",
    "FewShotConfig",
    "MorphologyLabel",
    "ShapeCategory",
    "ShapeSizeCategory",
    "SynthesisRecord",
    "build_prompt",
    "fit_boosted",
    "fit_forest",
    "fit_tree",
    "grid_search_cv",
    "importance_ranking",
    "load_dataset",
    "parse_answer",
    "pdi",
    "psnr",
    "save_dataset",
    "screen_features",
    "shap_matrix",
    "split",
    "ssim",
    "tree_shap",
]

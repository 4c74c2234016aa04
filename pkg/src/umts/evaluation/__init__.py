from .inference import (UncertaintyRow, dump_uncertainty, extract_features,
                        occlusion_contrast, write_uncertainty_table)
from .metrics import BACKEND, EvalResult, distance_matrix, evaluate

__all__ = [
    "BACKEND", "EvalResult", "UncertaintyRow", "distance_matrix", "dump_uncertainty",
    "evaluate", "extract_features", "occlusion_contrast", "write_uncertainty_table",
]

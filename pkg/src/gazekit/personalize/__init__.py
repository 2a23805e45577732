from .affine import SimilarityTransform, apply_affine, fit_affine
from .calibration import CalibrationSplitSpec, build_calibration_split, peripheral_dots
from .pipeline import (PersonalizationReport, PersonalizationSummary, UserData, personalize_user,
                       run_personalization, select_users)
from .svr import EPSILON_GRID, ScalarSvr, SvrModel, fit_scalar_svr, fit_svr, predict_svr, rbf_kernel

__all__ = [
    "CalibrationSplitSpec", "EPSILON_GRID", "PersonalizationReport", "PersonalizationSummary",
    "ScalarSvr", "SimilarityTransform", "SvrModel", "UserData", "apply_affine",
    "build_calibration_split", "fit_affine", "fit_scalar_svr", "fit_svr", "peripheral_dots",
    "personalize_user", "predict_svr", "rbf_kernel", "run_personalization", "select_users",
]

"""Static and landmark (dynamic) risk prediction for competing-risks data.

The package covers episode data handling, landmark stacking and the
Fine-Gray counting-process expansion, Cox-type and logistic regression
families, a regularized multi-task learner over landmark tasks, validation
metrics, a simulator with analytic truths, and a repeated-split experiment
harness exposed through the ``dynrisk`` command.
"""

__version__ = "0.1.0"

from .data_model import load_episodes, validate_episodes, write_episodes
from .glm import fit_logistic, fit_multinomial, predict_logistic
from .harness import make_splits, run_experiment
from .landmarking import expand_fine_gray, stack_landmarks
from .metrics import auc, calibration_slope, eci, evaluate, oe_ratio, scaled_brier
from .models import ROSTER, fit_model, predict_model
from .rmtl import fit_rmtl, predict_rmtl, tune_lambda1
from .simulation import attrition_config, constant_hazard_config, simulate
from .survival import fit_cause_specific, fit_cox, fit_fine_gray

__all__ = [
    "ROSTER",
    "attrition_config",
    "auc",
    "calibration_slope",
    "constant_hazard_config",
    "eci",
    "evaluate",
    "expand_fine_gray",
    "fit_cause_specific",
    "fit_cox",
    "fit_fine_gray",
    "fit_logistic",
    "fit_model",
    "fit_multinomial",
    "fit_rmtl",
    "load_episodes",
    "make_splits",
    "oe_ratio",
    "predict_logistic",
    "predict_model",
    "predict_rmtl",
    "run_experiment",
    "scaled_brier",
    "simulate",
    "stack_landmarks",
    "tune_lambda1",
    "validate_episodes",
    "write_episodes",
]

from .linear import (
    LambdaSelection,
    LinearFit,
    fit_elastic_net,
    fit_logistic_elastic_net,
    fit_with_selection,
    lambda_max,
    lambda_path,
    select_lambda,
    soft_threshold,
)
from .metrics import EvalMetrics, evaluate, rmse
from .models import (
    PREDICTION_COLUMNS,
    NuisanceFitter,
    NuisanceInputs,
    NuisancePredictions,
    fit_nuisances,
    linear_design,
)

__all__ = [
    "LambdaSelection", "LinearFit", "fit_elastic_net", "fit_logistic_elastic_net", "fit_with_selection",
    "lambda_max", "lambda_path", "select_lambda", "soft_threshold",
    "EvalMetrics", "evaluate", "rmse",
    "PREDICTION_COLUMNS", "NuisanceFitter", "NuisanceInputs", "NuisancePredictions", "fit_nuisances",
    "linear_design",
]

"""Cycle-consistent domain translation for electromagnetic-tracking error
compensation, with the simulator, training loop, ensemble wrapper and
evaluation harness around it."""
from .compensator import (CompensatedPoint, EnsembleModel, FineTuneCoeffs, apply_finetune,
                          fit_finetune, predict, predict_array, scalar_sigma, train_ensemble)
from .cyclegan import GanCheckpoint, LossWeights, TrainConfig, train, translate_point
from .distortion import (DistortionEnvSpec, FieldTerm, calibrate_severity, distort,
                         generate_dataset, make_environment)
from .errors import DataError, EmtError, NumericError
from .evaluation import (AblationConfig, AnnConfig, EvalReport, TrajectorySpec, ablation_run,
                         consistency_metric, evaluate, run_pipeline, trajectory_rotation_check)
from .geometry import (Dataset, GroundTruthGrid, MeasurementPoint, NormalizationBounds,
                       dataset_rmse, displacement_errors, displacement_rmse)
from .neuralnet import TrainSchedule, adam_step, lr_at
from .presets import table1_datasets

__all__ = [
    "CompensatedPoint", "EnsembleModel", "FineTuneCoeffs", "apply_finetune", "fit_finetune",
    "predict", "predict_array", "scalar_sigma", "train_ensemble", "GanCheckpoint",
    "LossWeights", "TrainConfig", "train", "translate_point", "DistortionEnvSpec", "FieldTerm",
    "calibrate_severity", "distort", "generate_dataset", "make_environment", "DataError",
    "EmtError", "NumericError", "AblationConfig", "AnnConfig", "EvalReport", "TrajectorySpec",
    "ablation_run", "consistency_metric", "evaluate", "run_pipeline",
    "trajectory_rotation_check", "Dataset", "GroundTruthGrid", "MeasurementPoint",
    "NormalizationBounds", "dataset_rmse", "displacement_errors", "displacement_rmse",
    "TrainSchedule", "adam_step", "lr_at", "table1_datasets",
]

__version__ = "0.1.0"

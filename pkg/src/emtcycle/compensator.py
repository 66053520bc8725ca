"""Deep-ensemble compensator with an optional affine fine-tuning stage."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .cyclegan import GanCheckpoint, TrainConfig, train, translate_array
from .errors import DataError, InsufficientDataError, SingularFitError
from .geometry import Dataset, MeasurementPoint

log = logging.getLogger(__name__)

FEATURES = ("1", "x", "y", "z", "q")
RIDGE = 1e-9
SCALAR_SIGMA_DEF = "mean(z,x,y)"


@dataclass(frozen=True)
class FineTuneCoeffs:
    """Affine corrections ``delta_c = w_c . (1, x, y, z, q)`` for c in x, y, z."""

    x: tuple
    y: tuple
    z: tuple

    def __post_init__(self):
        for c in ("x", "y", "z"):
            w = tuple(float(v) for v in getattr(self, c))
            if len(w) != len(FEATURES) or not np.all(np.isfinite(w)):
                raise DataError(f"fine-tune weights for {c} must be 5 finite numbers")
            object.__setattr__(self, c, w)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @classmethod
    def zeros(cls) -> "FineTuneCoeffs":
        return cls((0.0,) * 5, (0.0,) * 5, (0.0,) * 5)

    def to_json(self) -> dict:
        return {"x": list(self.x), "y": list(self.y), "z": list(self.z)}


@dataclass
class EnsembleModel:
    members: list
    finetune: FineTuneCoeffs | None = None

    def __post_init__(self):
        if len(self.members) < 2:
            raise InsufficientDataError("an ensemble needs at least 2 members")
        first = self.members[0]
        for m in self.members[1:]:
            if m.bounds != first.bounds:
                raise DataError("ensemble members use different normalisation bounds")
            if (m.config.generator != first.config.generator
                    or m.config.discriminator != first.config.discriminator):
                raise DataError("ensemble members use different layouts")

    @property
    def mode(self) -> str:
        return self.members[0].mode

    def to_json(self) -> dict:
        return {"members": [m.to_json() for m in self.members],
                "finetune": None if self.finetune is None else self.finetune.to_json(),
                "scalar_sigma_def": SCALAR_SIGMA_DEF}

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @classmethod
    def from_json(cls, d) -> "EnsembleModel":
        ft = d.get("finetune")
        return cls([GanCheckpoint.from_json(m) for m in d["members"]],
                   None if ft is None else FineTuneCoeffs(ft["x"], ft["y"], ft["z"]))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EnsembleModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class CompensatedPoint:
    point: MeasurementPoint
    sigma_pred: np.ndarray

    @property
    def sigma_scalar(self) -> float:
        return scalar_sigma(self.sigma_pred)


def scalar_sigma(sigma) -> float:
    """Single uncertainty figure: mean of the z, x and y channel deviations."""
    s = np.asarray(sigma, dtype=float)
    return float(np.mean(s[..., [2, 0, 1]]))


def _train_member(args):
    config, train_datasets, val_datasets = args
    return train(config, train_datasets, val_datasets)


def train_ensemble(config: TrainConfig, train_datasets, val_datasets=(), member_count: int = 10,
                   parallel: bool = False, jobs: int | None = None) -> EnsembleModel:
    """Member ``k`` is trained with seed ``config.seed + k``. Members are
    independent, so ``parallel`` only changes wall time, never results."""
    if member_count < 2:
        raise InsufficientDataError("member_count must be >= 2")
    tasks = [(replace(config, seed=config.seed + k), list(train_datasets), list(val_datasets))
             for k in range(member_count)]
    if parallel:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            members = list(pool.map(_train_member, tasks))
    else:
        members = []
        for k, t in enumerate(tasks):
            log.info("training member %d/%d (seed %d)", k + 1, member_count, t[0].seed)
            members.append(_train_member(t))
    return EnsembleModel(members)


def member_outputs(ens: EnsembleModel, values) -> np.ndarray:
    """Stacked per-member translations, shape (members, n, 7)."""
    return np.stack([translate_array(m, values) for m in ens.members])


def predict_array(ens: EnsembleModel, values, finetune: bool = True):
    """Ensemble mean (optionally fine-tuned) and per-channel population
    standard deviation for raw measurements of shape (n, 7)."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    outs = member_outputs(ens, v)
    mean = outs.mean(axis=0)
    sigma = outs.std(axis=0)
    # averaging equal values can round; x and y are passthrough channels
    mean[:, :2] = v[:, :2]
    sigma[:, :2] = 0.0
    if finetune and ens.finetune is not None:
        mean = apply_finetune_array(ens.finetune, mean)
    return mean, sigma


def predict(ens: EnsembleModel, p: MeasurementPoint) -> CompensatedPoint:
    mean, sigma = predict_array(ens, p.to_array())
    return CompensatedPoint(MeasurementPoint.from_array(mean[0]), sigma[0])


def _design(values) -> np.ndarray:
    v = np.atleast_2d(values)
    return np.column_stack([np.ones(len(v)), v[:, 0], v[:, 1], v[:, 2], v[:, 3]])


def fit_finetune_arrays(compensated, true_positions) -> FineTuneCoeffs:
    """Least squares from features of ``compensated`` (n, 7) to the residual
    towards ``true_positions`` after aligning the two centroids."""
    c = np.atleast_2d(np.asarray(compensated, dtype=float))
    t = np.atleast_2d(np.asarray(true_positions, dtype=float))
    if len(c) < len(FEATURES) + 1:
        raise InsufficientDataError(f"fine-tuning needs at least {len(FEATURES) + 1} samples")
    if not (np.all(np.isfinite(c[:, :4])) and np.all(np.isfinite(t))):
        raise SingularFitError("fine-tune inputs contain non-finite values")
    resid = (t - t.mean(axis=0)) - (c[:, :3] - c[:, :3].mean(axis=0))
    a = _design(c)
    ata = a.T @ a + RIDGE * np.eye(a.shape[1])
    if not np.all(np.isfinite(ata)) or np.linalg.cond(ata) > 1.0 / np.finfo(float).eps:
        raise SingularFitError("fine-tune design matrix is singular")
    w = np.linalg.solve(ata, a.T @ resid)
    if not np.all(np.isfinite(w)):
        raise SingularFitError("fine-tune produced non-finite coefficients")
    return FineTuneCoeffs(*w.T)


def fit_finetune(ens: EnsembleModel, reference) -> FineTuneCoeffs:
    """Fit the affine correction on one or more reference datasets.

    Each dataset is compensated by the ensemble (without fine-tuning) and
    aligned to its own ground-truth centroid, so datasets recorded with
    different board offsets can be pooled.
    """
    refs = [reference] if isinstance(reference, Dataset) else list(reference)
    if not refs:
        raise InsufficientDataError("no reference datasets for fine-tuning")
    comp, target = [], []
    for d in refs:
        mean, _ = predict_array(ens, d.values, finetune=False)
        t = d.true_positions
        comp.append(mean)
        # shift truth onto this dataset's compensated centroid
        target.append(t - t.mean(axis=0) + mean[:, :3].mean(axis=0))
    return fit_finetune_arrays(np.vstack(comp), np.vstack(target))


def apply_finetune_array(coeffs: FineTuneCoeffs, values) -> np.ndarray:
    v = np.array(np.atleast_2d(values), dtype=float)
    v[:, :3] += _design(v) @ coeffs.matrix.T
    return v


def apply_finetune(coeffs: FineTuneCoeffs, p: MeasurementPoint) -> MeasurementPoint:
    return MeasurementPoint.from_array(apply_finetune_array(coeffs, p.to_array())[0])

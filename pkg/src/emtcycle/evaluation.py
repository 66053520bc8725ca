"""Evaluation harness: per-environment error tables, the five-arm ablation,
cross-environment consistency, trajectory rotation checks and the
distance-optimising ANN baseline.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .compensator import (EnsembleModel, apply_finetune_array, fit_finetune, member_outputs,
                          predict_array, scalar_sigma, train_ensemble)
from .cyclegan import TrainConfig, fit_bounds
from .distortion import DistortionEnv, distort_array, in_volume
from .errors import DataError, EmtError, InsufficientDataError, OutOfVolumeError
from .geometry import (NormalizationBounds, displacement_error_array, displacement_rmse,
                       pair_indices)
from .neuralnet import (AdamState, MlpLayout, MlpParams, TrainSchedule, adam_step, leaky_relu,
                        lr_at, mlp_backward, mlp_forward, mlp_init, LINEAR)

log = logging.getLogger(__name__)

STAGES = ("raw", "cyclegan", "cyclegan_ft")
METHODS = ("raw", "vanilla_gan", "cyclegan", "cyclegan_ft", "ann")
FINETUNE_REFERENCES = ("carm", "lab")


# --- report ------------------------------------------------------------------------

@dataclass(frozen=True)
class ReportRow:
    method: str
    env_id: str
    rmse: float | None
    error_std: float | None
    n_pairs: int = 0
    status: str = "ok"
    note: str = ""


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    sigma_pred: dict = field(default_factory=dict)     # method -> scalar mm or None
    metrics: dict = field(default_factory=dict)        # extra scalars (consistency etc.)
    metadata: dict = field(default_factory=dict)

    def cell(self, method: str, env_id: str) -> ReportRow:
        for r in self.rows:
            if r.method == method and r.env_id == env_id:
                return r
        raise KeyError((method, env_id))

    def methods(self) -> list:
        return list(dict.fromkeys(r.method for r in self.rows))

    def environments(self) -> list:
        return list(dict.fromkeys(r.env_id for r in self.rows))

    @property
    def complete(self) -> bool:
        return all(r.status == "ok" for r in self.rows)

    def to_json(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "sigma_pred": self.sigma_pred,
                "metrics": self.metrics, "metadata": self.metadata}

    @classmethod
    def from_json(cls, d) -> "EvalReport":
        return cls([ReportRow(**r) for r in d["rows"]], dict(d.get("sigma_pred", {})),
                   dict(d.get("metrics", {})), dict(d.get("metadata", {})))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def text_table(self) -> str:
        """Aligned table: one block per method, one line per environment."""
        head = ("Method", "Dataset", "RMSE [mm]", "sigma_error [mm]", "sigma_pred [mm]")
        lines = []
        for method in self.methods():
            rows = [r for r in self.rows if r.method == method]
            sp = self.sigma_pred.get(method)
            for k, r in enumerate(rows):
                if r.status == "ok":
                    cells = (f"{r.rmse:.3f}", f"{r.error_std:.3f}")
                else:
                    cells = (r.status, r.note[:40])
                sig = "" if k or sp is None else f"{sp:.3f}"
                lines.append((method if k == 0 else "", r.env_id) + cells + (sig,))
        widths = [max(len(str(x)) for x in col) for col in zip(head, *lines)]
        fmt = lambda row: " | ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()
        out = [fmt(head), "-+-".join("-" * w for w in widths)]
        prev = None
        for row in lines:
            if row[0] and prev is not None:
                out.append("-+-".join("-" * w for w in widths))
            out.append(fmt(row))
            prev = row
        if "scalar_sigma_def" in self.metadata:
            out.append(f"sigma_pred = {self.metadata['scalar_sigma_def']} over all points")
        return "\n".join(out) + "\n"

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "env", "rmse", "error_std", "n_pairs", "status"])
        for r in self.rows:
            w.writerow([r.method, r.env_id, "" if r.rmse is None else repr(r.rmse),
                        "" if r.error_std is None else repr(r.error_std), r.n_pairs, r.status])
        return buf.getvalue()


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def write_report(report: EvalReport, out_dir, stem: str = "report", csv_series: bool = False,
                 svg_points: dict | None = None) -> list:
    """Write ``<stem>.json`` and ``<stem>.txt``; optionally a CSV of the rows
    and an SVG scatter of compensated z per environment (needs matplotlib)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{stem}.json", out / f"{stem}.txt"]
    paths[0].write_text(report.dumps())
    paths[1].write_text(report.text_table())
    if csv_series:
        p = out / f"{stem}_rows.csv"
        p.write_text(report.rows_csv())
        paths.append(p)
    if svg_points:
        p = _scatter_svg(svg_points, out / f"{stem}_consistency.svg")
        if p is not None:
            paths.append(p)
    return paths


def _scatter_svg(points: dict, path):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not available; skipping %s", path)
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, (x, z) in points.items():
        ax.scatter(x, z, s=10, label=name)
    ax.set_xlabel("x [mm]")
    ax.set_ylabel("z [mm]")
    ax.legend(fontsize=7)
    plt.rcParams["svg.hashsalt"] = "emtcycle"
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return Path(path)


# --- compensation stages -----------------------------------------------------------

def _member_sigma(outs) -> np.ndarray:
    return outs.std(axis=0)


def compensate(model, values, stage: str):
    """Apply one stage to raw measurements (n, 7). Returns ``(points, sigma)``;
    sigma is None for the raw stage."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if stage == "raw":
        return v.copy(), None
    if isinstance(model, AnnModel):
        return ann_predict_array(model, v)
    if not isinstance(model, EnsembleModel):
        raise DataError(f"stage {stage!r} needs an ensemble model")
    if stage == "cyclegan":
        return predict_array(model, v, finetune=False)
    if stage == "cyclegan_ft":
        if model.finetune is None:
            raise DataError("ensemble has no fine-tune coefficients")
        mean, _ = predict_array(model, v, finetune=True)
        # spread of the fine-tuned members, so the linear stage's effect shows up in sigma
        outs = np.stack([apply_finetune_array(model.finetune, o) for o in member_outputs(model, v)])
        return mean, _member_sigma(outs)
    raise ValueError(f"unknown stage {stage!r}")


def _rows_for(method, datasets, positions_list, pairing) -> list:
    rows = []
    for d, pos in zip(datasets, positions_list):
        pairs = pair_indices(d.indices, pairing)
        err = displacement_error_array(pos, d.true_positions, pairs)
        rmse, std = displacement_rmse(err)
        rows.append(ReportRow(method, d.env_id, rmse, std, len(pairs)))
    return rows


def evaluate(model, datasets, stage: str = "cyclegan_ft", pairing: str = "all_pairs",
             method: str | None = None) -> list:
    """Report rows (one per dataset) for the given compensation stage."""
    datasets = list(datasets)
    if not datasets:
        raise InsufficientDataError("no datasets to evaluate")
    if stage not in STAGES and not (stage == "ann" and isinstance(model, AnnModel)):
        raise ValueError(f"unknown stage {stage!r}")
    positions = [compensate(model, d.values, stage)[0][:, :3] for d in datasets]
    return _rows_for(method or stage, datasets, positions, pairing)


def sigma_pred(model, datasets, stage: str) -> float | None:
    """Scalar uncertainty averaged over every point of ``datasets``."""
    if stage == "raw":
        return None
    sig = np.vstack([compensate(model, d.values, stage)[1] for d in datasets])
    return scalar_sigma(sig.mean(axis=0))


# --- consistency -------------------------------------------------------------------

def _shared(env_datasets):
    if len(env_datasets) < 2:
        raise InsufficientDataError("consistency needs at least 2 environments")
    keys = [set(map(tuple, d.indices.tolist())) for d in env_datasets]
    common = sorted(set.intersection(*keys))
    if not common:
        raise DataError("environments share no grid indices")
    return common


def compensated_z_by_index(model, env_datasets, stage: str = "cyclegan") -> np.ndarray:
    """Array (environments, shared indices) of compensated z."""
    common = _shared(env_datasets)
    out = []
    for d in env_datasets:
        z = compensate(model, d.values, stage)[0][:, 2]
        pos = {tuple(ix): k for k, ix in enumerate(d.indices.tolist())}
        out.append(z[[pos[c] for c in common]])
    return np.array(out)


def consistency_metric(model, env_datasets, stage: str = "cyclegan") -> float:
    """Mean over shared grid indices of the max - min spread of z across
    environments. ``stage="raw"`` (or ``model=None``) gives the baseline."""
    if model is None:
        stage = "raw"
    z = compensated_z_by_index(model, env_datasets, stage)
    return float(np.mean(z.max(axis=0) - z.min(axis=0)))


# --- trajectories ------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    start: tuple = (-32.0, 12.0, 9.6)
    step: tuple = (8.0, 0.0, 0.0)
    steps: int = 13
    orientation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("a trajectory needs at least 2 steps")

    def poses(self) -> np.ndarray:
        k = np.arange(self.steps)[:, None]
        out = np.zeros((self.steps, 7))
        out[:, :3] = np.asarray(self.start) + k * np.asarray(self.step)
        out[:, 4:] = self.orientation
        return out


@dataclass(frozen=True)
class TrajectoryCheck:
    raw: np.ndarray           # (steps, 7) distorted measurements
    compensated: np.ndarray   # (steps, 7)
    raw_std: np.ndarray       # circular std per angle channel, deg
    compensated_std: np.ndarray

    @property
    def azimuth_improved(self) -> bool:
        return bool(self.compensated_std[2] < self.raw_std[2])

    def to_json(self) -> dict:
        return {"raw_std": self.raw_std.tolist(), "compensated_std": self.compensated_std.tolist(),
                "raw": self.raw.tolist(), "compensated": self.compensated.tolist()}

    def series_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step"] + [f"raw_{c}" for c in ("x", "y", "z", "phi_x", "phi_y", "phi_z")]
                   + [f"comp_{c}" for c in ("x", "y", "z", "phi_x", "phi_y", "phi_z")])
        cols = [0, 1, 2, 4, 5, 6]
        for k, (r, c) in enumerate(zip(self.raw, self.compensated)):
            w.writerow([k] + [repr(float(v)) for v in r[cols]] + [repr(float(v)) for v in c[cols]])
        return buf.getvalue()


def circular_std(angles_deg, axis=0) -> np.ndarray:
    """sqrt(-2 ln R) of the mean resultant length, in degrees."""
    a = np.radians(np.asarray(angles_deg, dtype=float))
    r = np.hypot(np.mean(np.cos(a), axis=axis), np.mean(np.sin(a), axis=axis))
    r = np.clip(r, 0.0, 1.0)
    return np.degrees(np.sqrt(-2.0 * np.log(np.maximum(r, 1e-300))))


def trajectory_rotation_check(model, spec: TrajectorySpec, env: DistortionEnv, seed: int = 0,
                              stage: str = "cyclegan") -> TrajectoryCheck:
    poses = spec.poses()
    if not np.all(in_volume(env, poses[:, :3])):
        raise OutOfVolumeError("trajectory leaves the working volume")
    raw = distort_array(env, poses, np.random.default_rng([env.seed, int(seed), 13]))
    comp = compensate(model, raw, stage)[0]
    return TrajectoryCheck(raw, comp, circular_std(raw[:, 4:]), circular_std(comp[:, 4:]))


# --- ANN baseline ------------------------------------------------------------------

@dataclass(frozen=True)
class AnnConfig:
    hidden: tuple = (32, 32)
    leak: float = 0.01
    schedule: TrainSchedule = TrainSchedule()
    seed: int = 0
    member_count: int = 10
    # zero the z offset (xy-plane confined variant)
    xy_confined: bool = False

    def layout(self) -> MlpLayout:
        return MlpLayout(7, tuple((w, leaky_relu(self.leak)) for w in self.hidden), 3, LINEAR)

    def to_json(self) -> dict:
        return {"hidden": list(self.hidden), "leak": self.leak,
                "schedule": self.schedule.to_json(), "seed": self.seed,
                "member_count": self.member_count, "xy_confined": self.xy_confined}


@dataclass
class AnnModel:
    members: list            # MlpParams, 7 -> 3 position offsets in mm
    bounds: NormalizationBounds
    config: AnnConfig

    def to_json(self) -> dict:
        return {"config": self.config.to_json(), "bounds": self.bounds.to_json(),
                "members": [m.to_json() for m in self.members]}


def _offset_mask(config: AnnConfig) -> np.ndarray:
    return np.array([1.0, 1.0, 0.0 if config.xy_confined else 1.0])


def _distance_loss_and_grad(pos, true, pairs):
    """Mean squared pairwise distance error and its gradient w.r.t. ``pos``."""
    if len(pairs) == 0:
        return 0.0, np.zeros_like(pos)
    i, j = pairs[:, 0], pairs[:, 1]
    diff = pos[i] - pos[j]
    dist = np.linalg.norm(diff, axis=1)
    err = dist - np.linalg.norm(true[i] - true[j], axis=1)
    loss = float(np.mean(err ** 2))
    coef = 2.0 * err / len(pairs) / np.maximum(dist, 1e-12)
    g = np.zeros_like(pos)
    np.add.at(g, i, coef[:, None] * diff)
    np.add.at(g, j, -coef[:, None] * diff)
    return loss, g


def _train_ann_member(config: AnnConfig, seed: int, xn, values, env, true) -> MlpParams:
    params = mlp_init(config.layout(), np.random.SeedSequence(seed).spawn(1)[0])
    state = AdamState.zeros_like(params.arrays())
    rng = np.random.default_rng([seed, 1])
    mask = _offset_mask(config)
    bs = config.schedule.batch_size
    for epoch in range(config.schedule.total_epochs):
        lr = lr_at(config.schedule, epoch)
        perm = rng.permutation(len(xn))
        for b0 in range(0, len(perm), bs):
            ib = perm[b0:b0 + bs]
            e = env[ib]
            pairs = np.array([(a, b) for a in range(len(ib)) for b in range(a + 1, len(ib))
                              if e[a] == e[b]], dtype=int).reshape(-1, 2)
            off, cache = mlp_forward(params, xn[ib])
            pos = values[ib, :3] + off * mask
            _, gpos = _distance_loss_and_grad(pos, true[ib], pairs)
            grads, _ = mlp_backward(params, cache, gpos * mask)
            new, state = adam_step(params.arrays(), grads, state, lr)
            params = MlpParams.from_arrays(params.layout, new)
    return params


def ann_baseline_train(config: AnnConfig, datasets) -> AnnModel:
    """Member ``k`` uses seed ``config.seed + k``; every training dataset
    (both domains) contributes its ground-truth distances."""
    datasets = list(datasets)
    if not datasets:
        raise InsufficientDataError("no training datasets for the ANN baseline")
    if config.member_count < 1:
        raise InsufficientDataError("member_count must be >= 1")
    bounds = fit_bounds(datasets)
    values = np.vstack([d.values for d in datasets])
    xn = bounds.normalize(values)
    env = np.concatenate([np.full(len(d), k) for k, d in enumerate(datasets)])
    true = np.vstack([d.true_positions for d in datasets])
    members = [_train_ann_member(config, config.seed + k, xn, values, env, true)
               for k in range(config.member_count)]
    return AnnModel(members, bounds, config)


def ann_predict_array(model: AnnModel, values):
    v = np.atleast_2d(np.asarray(values, dtype=float))
    xn = model.bounds.normalize(v)
    mask = _offset_mask(model.config)
    outs = []
    for m in model.members:
        o = v.copy()
        o[:, :3] += mlp_forward(m, xn)[0] * mask
        outs.append(o)
    outs = np.stack(outs)
    return outs.mean(axis=0), outs.std(axis=0)


def ann_baseline_eval(model: AnnModel, datasets, pairing: str = "all_pairs",
                      method: str = "ann") -> list:
    return evaluate(model, datasets, "ann", pairing, method=method)


# --- pipeline and ablation ---------------------------------------------------------

def split_roles(datasets):
    by = {"train": [], "validation": [], "evaluation": []}
    for d in datasets:
        by[d.role].append(d)
    return by["train"], by["validation"], by["evaluation"]


def finetune_reference(train_datasets, config: TrainConfig, which: str = "carm") -> list:
    """Datasets the linear stage is fitted on: the C-arm training scans once
    mapped to the laboratory domain (``carm``) or the raw laboratory scan (``lab``)."""
    if which not in FINETUNE_REFERENCES:
        raise ValueError(f"fine-tune reference must be one of {FINETUNE_REFERENCES}")
    lab = [d for d in train_datasets if d.env_id in config.lab_env_ids]
    carm = [d for d in train_datasets if d.env_id not in config.lab_env_ids]
    return carm if which == "carm" else lab


def run_pipeline(datasets, config: TrainConfig = TrainConfig(), member_count: int = 10,
                 finetune: bool = True, finetune_ref: str = "carm", parallel: bool = False,
                 jobs: int | None = None) -> EnsembleModel:
    """Train the ensemble on the training role and fit the linear stage."""
    train, val, _ = split_roles(datasets)
    ens = train_ensemble(config, train, val, member_count, parallel=parallel, jobs=jobs)
    if finetune:
        ens.finetune = fit_finetune(ens, finetune_reference(train, config, finetune_ref))
    return ens


@dataclass(frozen=True)
class AblationConfig:
    train: TrainConfig = TrainConfig()
    ann: AnnConfig = AnnConfig()
    member_count: int = 10
    arms: tuple = METHODS
    finetune_ref: str = "carm"
    pairing: str = "all_pairs"

    def to_json(self) -> dict:
        return {"train": self.train.to_json(), "ann": self.ann.to_json(),
                "member_count": self.member_count, "arms": list(self.arms),
                "finetune_ref": self.finetune_ref, "pairing": self.pairing}


def _failed_rows(method, datasets, exc) -> list:
    return [ReportRow(method, d.env_id, None, None, 0, "failed", f"{type(exc).__name__}: {exc}")
            for d in datasets]


def report_metadata(config_json: dict, datasets, **extra) -> dict:
    meta = {"config_hash": config_hash(config_json), "config": config_json,
            "datasets": [d.env_id for d in datasets],
            "scalar_sigma_def": "mean(z,x,y)"}
    meta.update(extra)
    return meta


def ablation_run(master: AblationConfig, datasets, models: dict | None = None,
                 parallel: bool = False, jobs: int | None = None) -> EvalReport:
    """Evaluate every arm over the evaluation-role datasets.

    ``models`` may supply already-trained models keyed by arm name
    (``vanilla_gan``, ``cyclegan``, ``ann``); missing ones are trained here
    and added to the dict.
    A failing arm is recorded per cell and the remaining arms still run.
    """
    train, val, evals = split_roles(datasets)
    if not evals:
        raise InsufficientDataError("no evaluation datasets")
    models = {} if models is None else models
    report = EvalReport(metadata=report_metadata(
        master.to_json(), datasets, seeds=[master.train.seed + k
                                           for k in range(master.member_count)]))
    for arm in master.arms:
        if arm not in METHODS:
            raise ValueError(f"unknown arm {arm!r}")
        try:
            if arm == "raw":
                model, stage = None, "raw"
            elif arm == "ann":
                model = models.get("ann") or ann_baseline_train(master.ann, train)
                models["ann"], stage = model, "ann"
            elif arm == "vanilla_gan":
                model = models.get("vanilla_gan") or train_ensemble(
                    replace(master.train, mode="vanilla_gan"), train, val,
                    master.member_count, parallel=parallel, jobs=jobs)
                models["vanilla_gan"], stage = model, "cyclegan"
            else:
                model = models.get("cyclegan") or train_ensemble(
                    master.train, train, val, master.member_count, parallel=parallel, jobs=jobs)
                models["cyclegan"], stage = model, arm
                if arm == "cyclegan_ft" and model.finetune is None:
                    model.finetune = fit_finetune(
                        model, finetune_reference(train, master.train, master.finetune_ref))
            report.rows += evaluate(model, evals, stage, master.pairing, method=arm)
            report.sigma_pred[arm] = sigma_pred(model, evals, stage)
        except EmtError as exc:
            log.error("arm %s failed: %s", arm, exc)
            report.rows += _failed_rows(arm, evals, exc)
            report.sigma_pred[arm] = None
    report.metrics["consistency_raw"] = consistency_metric(None, evals)
    for arm, stage in (("cyclegan", "cyclegan"), ("ann", "ann")):
        if arm in models:
            report.metrics[f"consistency_{arm}"] = consistency_metric(models[arm], evals, stage)
    return report

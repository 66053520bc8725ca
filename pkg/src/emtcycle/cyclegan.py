"""Cycle-consistent point translation between the C-arm domain (C) and the
laboratory domain (L).

Generators read a normalised 7-channel point and emit the five channels
``z, q, phi_x, phi_y, phi_z``; ``x`` and ``y`` are passed through untouched.
``G_CL`` maps C-arm points to laboratory points and is the one used for
compensation.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import DataError, InsufficientDataError, NumericError
from .geometry import MeasurementPoint, NormalizationBounds, canonical_angle
from .neuralnet import (MlpLayout, MlpParams, AdamState, TrainSchedule, SIGMOID, LINEAR,
                        adam_step, bce, bce_grad, l1_grad, l1_loss, leaky_relu, lr_at,
                        mlp_backward, mlp_forward, mlp_init)

log = logging.getLogger(__name__)

MODES = ("cyclegan", "vanilla_gan")
GEN = slice(2, 7)       # generated channels within a full point
Z, Q = 2, 3             # full-point column of z and q


@dataclass(frozen=True)
class LossWeights:
    adv: float = 0.5
    cycle: float = 10.0
    comp: float = 1e-5
    quality: float = 1.0

    def __post_init__(self):
        if min(self.adv, self.cycle, self.comp, self.quality) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class SoftLabelSpec:
    valid: tuple = (0.8, 1.0)
    fake: tuple = (0.0, 0.2)
    l_valid: float = 1.0

    def __post_init__(self):
        if not (self.fake[0] <= self.fake[1] < self.valid[0] <= self.valid[1]):
            raise ValueError("soft label ranges must be ordered and disjoint")


def generator_layout(depth=4, width=16, leak=0.01) -> MlpLayout:
    return MlpLayout.uniform(7, width, depth, leaky_relu(leak), 5, LINEAR)


def discriminator_layout(depth=3, width=16, leak=0.2) -> MlpLayout:
    return MlpLayout.uniform(7, width, depth, leaky_relu(leak), 1, SIGMOID)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "cyclegan"
    weights: LossWeights = LossWeights()
    schedule: TrainSchedule = TrainSchedule()
    soft_labels: SoftLabelSpec = SoftLabelSpec()
    seed: int = 0
    generator: MlpLayout = field(default_factory=generator_layout)
    discriminator: MlpLayout = field(default_factory=discriminator_layout)
    # generator output is added to the input channels it replaces
    residual_generator: bool = True
    lab_env_ids: tuple = ("lab",)
    lab_train_layers: tuple | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.generator.input_width != 7 or self.generator.output_width != 5:
            raise ValueError("generator must map 7 -> 5")
        if self.discriminator.input_width != 7 or self.discriminator.output_width != 1:
            raise ValueError("discriminator must map 7 -> 1")

    @property
    def effective_weights(self) -> LossWeights:
        if self.mode == "vanilla_gan":
            return replace(self.weights, cycle=0.0)
        return self.weights

    def to_json(self) -> dict:
        return {
            "mode": self.mode, "seed": self.seed,
            "loss_weights": asdict(self.weights), "schedule": self.schedule.to_json(),
            "soft_labels": {"valid": list(self.soft_labels.valid),
                            "fake": list(self.soft_labels.fake),
                            "l_valid": self.soft_labels.l_valid},
            "generator": self.generator.to_json(), "discriminator": self.discriminator.to_json(),
            "residual_generator": self.residual_generator,
            "lab_env_ids": list(self.lab_env_ids),
            "lab_train_layers": None if self.lab_train_layers is None else list(self.lab_train_layers),
        }

    @classmethod
    def from_json(cls, d) -> "TrainConfig":
        sl = d.get("soft_labels", {})
        return cls(
            mode=d["mode"], seed=int(d["seed"]),
            weights=LossWeights(**d["loss_weights"]), schedule=TrainSchedule(**d["schedule"]),
            soft_labels=SoftLabelSpec(tuple(sl.get("valid", (0.8, 1.0))),
                                      tuple(sl.get("fake", (0.0, 0.2))),
                                      sl.get("l_valid", 1.0)),
            generator=MlpLayout.from_json(d["generator"]),
            discriminator=MlpLayout.from_json(d["discriminator"]),
            residual_generator=bool(d.get("residual_generator", True)),
            lab_env_ids=tuple(d.get("lab_env_ids", ("lab",))),
            lab_train_layers=None if d.get("lab_train_layers") is None
            else tuple(d["lab_train_layers"]),
        )


@dataclass
class GanModels:
    g_cl: MlpParams
    g_lc: MlpParams
    d_cl: MlpParams
    d_lc: MlpParams

    def copy(self) -> "GanModels":
        return GanModels(self.g_cl.copy(), self.g_lc.copy(), self.d_cl.copy(), self.d_lc.copy())

    def to_json(self) -> dict:
        return {k: getattr(self, k).to_json() for k in ("g_cl", "g_lc", "d_cl", "d_lc")}

    @classmethod
    def from_json(cls, d) -> "GanModels":
        return cls(*(MlpParams.from_json(d[k]) for k in ("g_cl", "g_lc", "d_cl", "d_lc")))


def init_models(config: TrainConfig) -> GanModels:
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    return GanModels(mlp_init(config.generator, seeds[0]), mlp_init(config.generator, seeds[1]),
                     mlp_init(config.discriminator, seeds[2]),
                     mlp_init(config.discriminator, seeds[3]))


# --- building blocks ---------------------------------------------------------------

def assemble_full_point(inputs, generated) -> np.ndarray:
    """``(x_in, y_in, generated...)``; works on single points and batches."""
    inputs = np.asarray(inputs, dtype=float)
    generated = np.asarray(generated, dtype=float)
    return np.concatenate([inputs[..., :2], generated], axis=-1)


def generate(g: MlpParams, x, residual: bool = True):
    """Run a generator on normalised full points. Returns ``(full_points, cache)``."""
    x = np.atleast_2d(x)
    out, cache = mlp_forward(g, x)
    if residual:
        out = out + x[:, GEN]
    return assemble_full_point(x, out), (cache, residual)


def generate_backward(g: MlpParams, cache, d_full):
    """Gradient through :func:`generate`; ``d_full`` is d loss / d full point.
    Returns (param grads, d loss / d input)."""
    mcache, residual = cache
    grads, dx = mlp_backward(g, mcache, d_full[:, GEN])
    dx = dx.copy()
    dx[:, :2] += d_full[:, :2]
    if residual:
        dx[:, GEN] += d_full[:, GEN]
    return grads, dx


@dataclass
class PairInfo:
    """Per-row environment labels and true grid positions (mm) for a C batch."""
    env: np.ndarray
    true_pos: np.ndarray

    def pairs(self) -> np.ndarray:
        a, b = np.triu_indices(len(self.env), k=1)
        same = self.env[a] == self.env[b]
        return np.column_stack([a[same], b[same]])


def _comp_loss(full_c, bounds: NormalizationBounds, pair_info: PairInfo):
    """MSE between translated and true pairwise distances in mm, and its
    gradient w.r.t. the normalised z column."""
    pairs = pair_info.pairs()
    n = len(full_c)
    if len(pairs) == 0:
        return 0.0, np.zeros(n)
    pos = full_c[:, :3] * bounds.span[:3] + bounds.lo_arr[:3]
    a, b = pairs[:, 0], pairs[:, 1]
    diff = pos[a] - pos[b]
    d = np.linalg.norm(diff, axis=1)
    t = np.linalg.norm(pair_info.true_pos[a] - pair_info.true_pos[b], axis=1)
    r = d - t
    loss = float(np.mean(r ** 2))
    coef = 2.0 * r / len(pairs) / np.maximum(d, 1e-12)
    gz = np.zeros(n)
    np.add.at(gz, a, coef * diff[:, 2])
    np.add.at(gz, b, -coef * diff[:, 2])
    return loss, gz * bounds.span[2]


def _generator_pass(models: GanModels, batch_c, batch_l, weights: LossWeights, pair_info,
                    bounds, mode="cyclegan", l_valid=1.0, residual=True, need_grads=True):
    xc = np.atleast_2d(np.asarray(batch_c, dtype=float))
    xl = np.atleast_2d(np.asarray(batch_l, dtype=float))
    if len(xc) == 0 or (mode == "cyclegan" and len(xl) == 0):
        raise InsufficientDataError("empty batch")
    if weights.comp > 0 and (pair_info is None or bounds is None):
        raise DataError("pair_info and bounds are required when the compensation weight is > 0")
    cyc = mode == "cyclegan"

    fc, c_gc = generate(models.g_cl, xc, residual)
    pc, c_dc = mlp_forward(models.d_cl, fc)
    adv = bce(pc, l_valid)
    cycle = 0.0
    if cyc:
        fl, c_gl = generate(models.g_lc, xl, residual)
        pl, c_dl = mlp_forward(models.d_lc, fl)
        adv += bce(pl, l_valid)
        rc, c_rc = generate(models.g_lc, fc, residual)
        rl, c_rl = generate(models.g_cl, fl, residual)
        cycle = l1_loss(rc[:, GEN], xc[:, GEN]) + l1_loss(rl[:, GEN], xl[:, GEN])
    if weights.comp > 0:
        comp, comp_gz = _comp_loss(fc, bounds, pair_info)
    else:
        comp, comp_gz = 0.0, None
    quality = float(np.mean(fc[:, Q] ** 2))
    total = weights.adv * adv + weights.cycle * cycle + weights.comp * comp + weights.quality * quality
    components = {"adv": adv, "cycle": cycle, "comp": comp, "quality": quality, "total": total}
    if not need_grads:
        return components, None, {"fake_l": fc, "fake_c": fl if cyc else None}

    d_fc = np.zeros_like(fc)
    _, d = mlp_backward(models.d_cl, c_dc, weights.adv * bce_grad(pc, l_valid))
    d_fc += d
    d_fc[:, Q] += weights.quality * 2.0 * fc[:, Q] / len(fc)
    if comp_gz is not None:
        d_fc[:, Z] += weights.comp * comp_gz
    g_lc_grads = None
    g_cl_extra = None
    if cyc:
        d_rc = np.zeros_like(rc)
        d_rc[:, GEN] = weights.cycle * l1_grad(rc[:, GEN], xc[:, GEN])
        g_lc_grads, d = generate_backward(models.g_lc, c_rc, d_rc)
        d_fc += d
        d_rl = np.zeros_like(rl)
        d_rl[:, GEN] = weights.cycle * l1_grad(rl[:, GEN], xl[:, GEN])
        g_cl_extra, d_fl = generate_backward(models.g_cl, c_rl, d_rl)
        _, d = mlp_backward(models.d_lc, c_dl, weights.adv * bce_grad(pl, l_valid))
        d_fl += d
        g2, _ = generate_backward(models.g_lc, c_gl, d_fl)
        g_lc_grads = [a + b for a, b in zip(g_lc_grads, g2)]
    g_cl_grads, _ = generate_backward(models.g_cl, c_gc, d_fc)
    if g_cl_extra is not None:
        g_cl_grads = [a + b for a, b in zip(g_cl_grads, g_cl_extra)]
    grads = {"g_cl": g_cl_grads, "g_lc": g_lc_grads}
    return components, grads, {"fake_l": fc, "fake_c": fl if cyc else None}


def generator_loss(models: GanModels, batch_c, batch_l, weights: LossWeights = LossWeights(),
                   pair_info: PairInfo | None = None, bounds: NormalizationBounds | None = None,
                   mode: str = "cyclegan", l_valid: float = 1.0, residual: bool = True):
    """Weighted generator objective. Returns ``(total, components)``."""
    comps, _, _ = _generator_pass(models, batch_c, batch_l, weights, pair_info, bounds,
                                  mode, l_valid, residual, need_grads=False)
    return comps["total"], {k: comps[k] for k in ("adv", "cycle", "comp", "quality")}


def generator_loss_and_grads(models, batch_c, batch_l, weights=LossWeights(), pair_info=None,
                             bounds=None, mode="cyclegan", l_valid=1.0, residual=True):
    """As :func:`generator_loss`, plus parameter gradients for both generators."""
    comps, grads, _ = _generator_pass(models, batch_c, batch_l, weights, pair_info, bounds,
                                      mode, l_valid, residual)
    return comps["total"], comps, grads


def _labels(rng, lo_hi, n):
    return rng.uniform(lo_hi[0], lo_hi[1], size=(n, 1))


def discriminator_loss_and_grads(d: MlpParams, real, fake, soft_labels=SoftLabelSpec(), seed=0):
    real = np.atleast_2d(real)
    fake = np.atleast_2d(fake)
    if len(real) == 0 or len(fake) == 0:
        raise InsufficientDataError("empty batch")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    yr = _labels(rng, soft_labels.valid, len(real))
    yf = _labels(rng, soft_labels.fake, len(fake))
    pr, cr = mlp_forward(d, real)
    pf, cf = mlp_forward(d, fake)
    loss = bce(pr, yr) + bce(pf, yf)
    gr, _ = mlp_backward(d, cr, bce_grad(pr, yr))
    gf, _ = mlp_backward(d, cf, bce_grad(pf, yf))
    return loss, [a + b for a, b in zip(gr, gf)]


def discriminator_loss(d: MlpParams, real, fake, soft_labels=SoftLabelSpec(), seed=0) -> float:
    """BCE on real points against labels drawn from the valid range plus BCE on
    generated points against labels from the fake range."""
    return discriminator_loss_and_grads(d, real, fake, soft_labels, seed)[0]


# --- checkpoints -------------------------------------------------------------------

@dataclass
class GanCheckpoint:
    models: GanModels
    bounds: NormalizationBounds
    config: TrainConfig
    loss_trace: list = field(default_factory=list)
    val_z_rmse_init: float | None = None

    @property
    def mode(self) -> str:
        return self.config.mode

    @property
    def seed(self) -> int:
        return self.config.seed

    def to_json(self) -> dict:
        cfg = self.config.to_json()
        return {"mode": self.mode, "seed": self.seed, "loss_weights": cfg["loss_weights"],
                "schedule": cfg["schedule"], "bounds": self.bounds.to_json(),
                "config": cfg, "models": self.models.to_json(), "loss_trace": self.loss_trace,
                "val_z_rmse_init": self.val_z_rmse_init}

    @classmethod
    def from_json(cls, d) -> "GanCheckpoint":
        return cls(GanModels.from_json(d["models"]), NormalizationBounds.from_json(d["bounds"]),
                   TrainConfig.from_json(d["config"]), list(d.get("loss_trace", [])),
                   d.get("val_z_rmse_init"))

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def translate_array(ckpt: GanCheckpoint, values) -> np.ndarray:
    """Compensate raw 7-channel measurements (mm, deg) with ``G_CL``."""
    v = np.atleast_2d(np.asarray(values, dtype=float))
    u = ckpt.bounds.normalize(v)
    full, _ = generate(ckpt.models.g_cl, u, ckpt.config.residual_generator)
    out = ckpt.bounds.denormalize(full)
    out[:, :2] = v[:, :2]
    out[:, Q] = np.maximum(out[:, Q], 0.0)
    out[:, 4:] = canonical_angle(out[:, 4:])
    return out


def translate_point(ckpt: GanCheckpoint, p: MeasurementPoint) -> MeasurementPoint:
    return MeasurementPoint.from_array(translate_array(ckpt, p.to_array())[0])


# --- training ----------------------------------------------------------------------

def split_domains(datasets, config: TrainConfig):
    """Split training datasets into laboratory and C-arm lists."""
    lab = [d for d in datasets if d.env_id in config.lab_env_ids]
    carm = [d for d in datasets if d.env_id not in config.lab_env_ids]
    if config.lab_train_layers is not None:
        lab = [d.layers(config.lab_train_layers) for d in lab]
    return lab, carm


def fit_bounds(datasets) -> NormalizationBounds:
    return NormalizationBounds.from_data(np.vstack([d.values for d in datasets]))


class _Stream:
    """Endless shuffled index stream over ``n`` rows."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.perm, self.pos = rng.permutation(n), 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.perm, self.pos = self.rng.permutation(self.n), 0
            m = min(k - len(out), self.n - self.pos)
            out.extend(self.perm[self.pos:self.pos + m])
            self.pos += m
        return np.array(out, dtype=int)


def _val_z_rmse(models, bounds, residual, val):
    if val is None:
        return None
    u, true_z = val
    full, _ = generate(models.g_cl, u, residual)
    z = full[:, Z] * bounds.span[Z] + bounds.lo[Z]
    return float(np.sqrt(np.mean((z - true_z) ** 2)))


def train(config: TrainConfig, train_datasets, val_datasets=()) -> GanCheckpoint:
    """Train one ensemble member. Deterministic in ``(config, datasets)``."""
    lab, carm = split_domains(train_datasets, config)
    if not carm:
        raise DataError("no C-arm training data")
    if config.mode == "cyclegan" and not lab:
        raise DataError("no laboratory training data")
    if not lab:
        raise DataError("no laboratory training data (needed as discriminator reference)")
    bounds = fit_bounds(lab + carm)
    xl = bounds.normalize(np.vstack([d.values for d in lab]))
    xc = bounds.normalize(np.vstack([d.values for d in carm]))
    env_c = np.concatenate([np.full(len(d), k) for k, d in enumerate(carm)])
    true_c = np.vstack([d.true_positions for d in carm])
    val_carm = [d for d in val_datasets if d.env_id not in config.lab_env_ids]
    val = None
    if val_carm:
        vv = np.vstack([d.values for d in val_carm])
        val = (bounds.normalize(vv), np.vstack([d.true_positions for d in val_carm])[:, 2])

    models = init_models(config)
    streams = np.random.SeedSequence(config.seed).spawn(6)
    rng_c = np.random.default_rng(streams[4])
    rng_lab = np.random.default_rng(streams[5])
    rng_labels = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(7)[6])
    lab_stream = _Stream(len(xl), rng_lab)

    w = config.effective_weights
    sched = config.schedule
    cyc = config.mode == "cyclegan"
    res = config.residual_generator
    g_params = models.g_cl.arrays() + (models.g_lc.arrays() if cyc else [])
    n_gcl = len(models.g_cl.arrays())
    g_state = AdamState.zeros_like(g_params)
    dcl_state = AdamState.zeros_like(models.d_cl.arrays())
    dlc_state = AdamState.zeros_like(models.d_lc.arrays())
    trace = []
    val0 = _val_z_rmse(models, bounds, res, val)
    bs = sched.batch_size

    for epoch in range(sched.total_epochs):
        lr = lr_at(sched, epoch)
        perm = rng_c.permutation(len(xc))
        sums = dict.fromkeys(("adv", "cycle", "comp", "quality", "total", "d_cl", "d_lc"), 0.0)
        n_batches = 0
        for b0 in range(0, len(perm), bs):
            ic = perm[b0:b0 + bs]
            il = lab_stream.take(len(ic))
            bc, bl = xc[ic], xl[il]
            pinfo = PairInfo(env_c[ic], true_c[ic])
            comps, grads, fakes = _generator_pass(
                models, bc, bl, w, pinfo, bounds, config.mode, config.soft_labels.l_valid, res)
            if not np.isfinite(comps["total"]):
                raise NumericError(f"non-finite generator loss at epoch {epoch}, batch {n_batches}")
            flat = grads["g_cl"] + (grads["g_lc"] if cyc else [])
            g_params, g_state = adam_step(g_params, flat, g_state, lr)
            loss_dcl, gd = discriminator_loss_and_grads(
                models.d_cl, bl, fakes["fake_l"], config.soft_labels, rng_labels)
            new, dcl_state = adam_step(models.d_cl.arrays(), gd, dcl_state, lr)
            models.d_cl = MlpParams.from_arrays(models.d_cl.layout, new)
            loss_dlc = 0.0
            if cyc:
                loss_dlc, gd = discriminator_loss_and_grads(
                    models.d_lc, bc, fakes["fake_c"], config.soft_labels, rng_labels)
                new, dlc_state = adam_step(models.d_lc.arrays(), gd, dlc_state, lr)
                models.d_lc = MlpParams.from_arrays(models.d_lc.layout, new)
            if not (np.isfinite(loss_dcl) and np.isfinite(loss_dlc)):
                raise NumericError(f"non-finite discriminator loss at epoch {epoch}, "
                                   f"batch {n_batches}")
            models.g_cl = MlpParams.from_arrays(models.g_cl.layout, g_params[:n_gcl])
            if cyc:
                models.g_lc = MlpParams.from_arrays(models.g_lc.layout, g_params[n_gcl:])
            for k in ("adv", "cycle", "comp", "quality", "total"):
                sums[k] += comps[k]
            sums["d_cl"] += loss_dcl
            sums["d_lc"] += loss_dlc
            n_batches += 1
        entry = {"epoch": epoch, "lr": lr}
        entry.update({k: v / n_batches for k, v in sums.items()})
        entry["val_z_rmse"] = _val_z_rmse(models, bounds, res, val)
        trace.append(entry)
        log.debug("seed %d epoch %d: %s", config.seed, epoch, entry)

    return GanCheckpoint(models, bounds, config, trace, val0)

"""Synthetic tracking environments.

An environment displaces true sensor poses by a smooth field (low-order
polynomials plus an inverse-cube term anchored at a virtual X-ray source),
adds averaged measurement noise and reports a quality estimate that grows
with the local displacement. A severity scale multiplies the
environment-specific field so that it can be calibrated against a target
displacement RMSE.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

from .errors import InvalidSpecError, OutOfVolumeError, UnreachableTargetError
from .geometry import Dataset, GroundTruthGrid, MeasurementPoint, canonical_angle, dataset_rmse

TERM_KINDS = ("polynomial_deg2", "polynomial_deg3", "inverse_cube_dipole")
N_AVERAGED = 500        # raw samples averaged per measuring point
POLY_SCALE = 100.0      # polynomial coordinates are (p - board_center) / 100 mm
DIPOLE_REF = 100.0      # dipole coefficients are given at 100 mm from the source
DEFAULT_VOLUME = ((-150.0, 250.0), (-150.0, 250.0), (-100.0, 150.0))


@lru_cache(maxsize=None)
def monomial_exponents(degree: int) -> tuple:
    """Exponent triples of every monomial in (x, y, z) up to ``degree``,
    ordered by total degree, then lexicographically by variable."""
    out = []
    for d in range(degree + 1):
        for combo in combinations_with_replacement(range(3), d):
            e = [0, 0, 0]
            for v in combo:
                e[v] += 1
            out.append(tuple(e))
    return tuple(out)


def _poly_degree(kind):
    return {"polynomial_deg2": 2, "polynomial_deg3": 3}[kind]


@dataclass(frozen=True)
class FieldTerm:
    """One field component.

    Polynomial terms carry ``3 * M`` coefficients (x-displacement monomial
    weights, then y, then z; mm per dm**degree). The dipole term carries six:
    positional displacement (mm) and angular offset (deg) at 100 mm from
    the source.
    """

    kind: str
    coefficients: tuple

    def __post_init__(self):
        object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))
        if self.kind not in TERM_KINDS:
            raise InvalidSpecError(f"unknown field term {self.kind!r}")
        expected = 6 if self.kind == "inverse_cube_dipole" else \
            3 * len(monomial_exponents(_poly_degree(self.kind)))
        if len(self.coefficients) != expected:
            raise InvalidSpecError(f"{self.kind} needs {expected} coefficients, "
                                   f"got {len(self.coefficients)}")
        if not np.all(np.isfinite(self.coefficients)):
            raise InvalidSpecError("non-finite field coefficient")

    def scaled(self, s: float) -> "FieldTerm":
        return FieldTerm(self.kind, tuple(s * c for c in self.coefficients))

    def to_json(self):
        return {"kind": self.kind, "coefficients": list(self.coefficients)}


@dataclass(frozen=True)
class DistortionEnvSpec:
    env_id: str
    source_distance: float = 100.0
    gantry_angle: float = 0.0
    field_terms: tuple = ()
    severity_scale: float = 1.0
    noise_sigma_pos: float = 0.0
    noise_sigma_ang: float = 0.0
    quality_gain: float = 1.0
    # tracker-intrinsic distortion present regardless of severity
    background_terms: tuple = ()
    axis_weights: tuple = (1.0, 1.0, 2.0)
    board_center: tuple = (16.0, 12.0, 0.0)
    working_volume: tuple = DEFAULT_VOLUME

    def __post_init__(self):
        fix = object.__setattr__
        fix(self, "field_terms", tuple(t if isinstance(t, FieldTerm) else FieldTerm(**t)
                                       for t in self.field_terms))
        fix(self, "background_terms", tuple(t if isinstance(t, FieldTerm) else FieldTerm(**t)
                                            for t in self.background_terms))
        fix(self, "axis_weights", tuple(float(w) for w in self.axis_weights))
        fix(self, "board_center", tuple(float(c) for c in self.board_center))
        fix(self, "working_volume", tuple(tuple(float(c) for c in ax) for ax in self.working_volume))
        if not self.severity_scale >= 0:
            raise InvalidSpecError(f"{self.env_id}: severity_scale must be >= 0")
        if not (self.noise_sigma_pos >= 0 and self.noise_sigma_ang >= 0):
            raise InvalidSpecError(f"{self.env_id}: noise sigmas must be >= 0")
        if not self.quality_gain >= 0:
            raise InvalidSpecError(f"{self.env_id}: quality_gain must be >= 0")
        if not self.source_distance > 0:
            raise InvalidSpecError(f"{self.env_id}: source_distance must be > 0")

    def with_severity(self, s: float) -> "DistortionEnvSpec":
        return replace(self, severity_scale=float(s))

    def source_position(self) -> np.ndarray:
        th = np.radians(self.gantry_angle)
        return np.array(self.board_center) + self.source_distance * np.array(
            [np.sin(th), 0.0, -np.cos(th)])

    def to_json(self) -> dict:
        return {
            "env_id": self.env_id, "source_distance": self.source_distance,
            "gantry_angle": self.gantry_angle,
            "field_terms": [t.to_json() for t in self.field_terms],
            "severity_scale": self.severity_scale,
            "noise_sigma_pos": self.noise_sigma_pos, "noise_sigma_ang": self.noise_sigma_ang,
            "quality_gain": self.quality_gain,
            "background_terms": [t.to_json() for t in self.background_terms],
            "axis_weights": list(self.axis_weights), "board_center": list(self.board_center),
            "working_volume": [list(a) for a in self.working_volume],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DistortionEnvSpec":
        d = dict(d)
        d.pop("seed", None)
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpecError(str(exc)) from None


@dataclass(frozen=True)
class DistortionEnv:
    spec: DistortionEnvSpec
    seed: int
    source: np.ndarray = field(repr=False, compare=False)

    def __eq__(self, other):
        return (isinstance(other, DistortionEnv) and self.spec == other.spec
                and self.seed == other.seed and np.array_equal(self.source, other.source))

    __hash__ = None


def make_environment(spec: DistortionEnvSpec, seed: int = 0) -> DistortionEnv:
    if not spec.severity_scale >= 0 or spec.noise_sigma_pos < 0 or spec.noise_sigma_ang < 0:
        raise InvalidSpecError(f"{spec.env_id}: invalid severity or noise")
    return DistortionEnv(spec, int(seed), spec.source_position())


# --- field evaluation ----------------------------------------------------------------

def _poly_features(u, degree):
    exps = np.array(monomial_exponents(degree))
    return np.prod(u[:, None, :] ** exps[None, :, :], axis=2)


def _eval_term(term: FieldTerm, env: DistortionEnv, p):
    """Positional (n, 3) and angular (n, 3) contribution of one term."""
    n = len(p)
    c = np.array(term.coefficients)
    if term.kind == "inverse_cube_dipole":
        r = np.linalg.norm(p - env.source, axis=1)
        fall = (DIPOLE_REF / r) ** 3
        return fall[:, None] * c[None, :3], fall[:, None] * c[None, 3:]
    u = (p - np.array(env.spec.board_center)) / POLY_SCALE
    feats = _poly_features(u, _poly_degree(term.kind))
    return feats @ c.reshape(3, -1).T, np.zeros((n, 3))


def field_displacement(env: DistortionEnv, positions, include_background: bool = True):
    """Noise-free (positional, angular) displacement at ``positions``."""
    p = np.atleast_2d(np.asarray(positions, dtype=float))
    pos = np.zeros_like(p)
    ang = np.zeros_like(p)
    s = env.spec.severity_scale
    if s > 0:
        for t in env.spec.field_terms:
            dp, da = _eval_term(t, env, p)
            pos += dp
            ang += da
        pos *= s * np.array(env.spec.axis_weights)
        ang *= s
    if include_background:
        for t in env.spec.background_terms:
            dp, da = _eval_term(t, env, p)
            pos += dp
            ang += da
    return pos, ang


def in_volume(env: DistortionEnv, positions) -> np.ndarray:
    p = np.atleast_2d(np.asarray(positions, dtype=float))
    ok = np.ones(len(p), dtype=bool)
    for ax, (lo, hi) in enumerate(env.spec.working_volume):
        ok &= (p[:, ax] >= lo) & (p[:, ax] <= hi)
    return ok


def distort_array(env: DistortionEnv, true_values, rng=None) -> np.ndarray:
    """Vectorised distortion of true 7-channel poses (the q column is ignored)."""
    v = np.atleast_2d(np.asarray(true_values, dtype=float))
    p = v[:, :3]
    bad = ~in_volume(env, p)
    if bad.any():
        raise OutOfVolumeError(f"{env.spec.env_id}: pose {p[bad][0].tolist()} "
                               f"outside working volume")
    disp, ang = field_displacement(env, p)
    sp = env.spec.noise_sigma_pos / np.sqrt(N_AVERAGED)
    sa = env.spec.noise_sigma_ang / np.sqrt(N_AVERAGED)
    n = len(v)
    if rng is None:
        rng = np.random.default_rng(env.seed)
    noise_p = rng.standard_normal((n, 3)) * sp
    noise_a = rng.standard_normal((n, 3)) * sa
    noise_q = rng.standard_normal(n) * sp
    out = np.empty_like(v)
    out[:, :3] = p + disp + noise_p
    out[:, 3] = env.spec.quality_gain * (np.linalg.norm(disp, axis=1) + np.abs(noise_q))
    out[:, 4:] = canonical_angle(v[:, 4:] + ang + noise_a)
    return out


def distort(env: DistortionEnv, true_pose: MeasurementPoint, sample_seed: int = 0) -> MeasurementPoint:
    rng = np.random.default_rng([env.seed, int(sample_seed)])
    return MeasurementPoint.from_array(distort_array(env, true_pose.to_array(), rng)[0])


def generate_dataset(env: DistortionEnv, grid: GroundTruthGrid, role: str = "train",
                     seed: int = 0, orientation=(0.0, 0.0, 0.0)) -> Dataset:
    """One averaged measurement per grid index; deterministic in all arguments."""
    idx = grid.indices()
    true = np.zeros((len(idx), 7))
    true[:, :3] = grid.true_positions(idx)
    true[:, 4:] = orientation
    rng = np.random.default_rng([env.seed, int(seed)])
    return Dataset(env.spec.env_id, role, grid, idx, distort_array(env, true, rng))


def calibrate_severity(spec: DistortionEnvSpec, grid: GroundTruthGrid, target_rmse: float,
                       tolerance: float = 0.05, env_seed: int = 0, dataset_seed: int = 0,
                       max_iter: int = 60, rtol: float = 1e-4) -> DistortionEnvSpec:
    """Bracket-and-bisect ``severity_scale`` until the generated dataset's raw
    displacement RMSE is within ``tolerance`` of ``target_rmse`` (and keep
    tightening to ``rtol`` mm while iterations remain)."""

    def rmse(s):
        env = make_environment(spec.with_severity(s), env_seed)
        return dataset_rmse(generate_dataset(env, grid, "train", dataset_seed))[0]

    current = rmse(spec.severity_scale)
    if abs(current - target_rmse) <= rtol:
        return spec
    floor = rmse(0.0)
    if target_rmse < floor - tolerance:
        raise UnreachableTargetError(
            f"{spec.env_id}: target {target_rmse:.3f} mm below noise floor {floor:.3f} mm")
    if target_rmse <= floor:
        return spec.with_severity(0.0)
    if not spec.field_terms:
        raise UnreachableTargetError(f"{spec.env_id}: no field terms to scale")

    lo, hi = 0.0, max(spec.severity_scale, 1e-3)
    it = 0
    while rmse(hi) < target_rmse:
        lo, hi = hi, 2 * hi
        it += 1
        if it >= max_iter:
            raise UnreachableTargetError(f"{spec.env_id}: could not bracket target")
    best_s, best_err = hi, abs(rmse(hi) - target_rmse)
    while it < max_iter:
        mid = 0.5 * (lo + hi)
        r = rmse(mid)
        it += 1
        if abs(r - target_rmse) < best_err:
            best_s, best_err = mid, abs(r - target_rmse)
        if best_err <= rtol:
            break
        if r < target_rmse:
            lo = mid
        else:
            hi = mid
    if best_err > tolerance:
        raise UnreachableTargetError(f"{spec.env_id}: best RMSE misses target by {best_err:.3f} mm")
    return spec.with_severity(best_s)


def save_env_spec(spec: DistortionEnvSpec, seed: int, path):
    d = spec.to_json()
    d["seed"] = int(seed)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2)
        fh.write("\n")


def load_env_spec(path) -> tuple[DistortionEnvSpec, int]:
    with open(path) as fh:
        d = json.load(fh)
    try:
        seed = int(d["seed"])
    except KeyError:
        raise InvalidSpecError(f"{path}: env spec needs an explicit seed") from None
    return DistortionEnvSpec.from_json(d), seed

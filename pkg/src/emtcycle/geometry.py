"""Measurement types, Lego ground-truth grids, normalisation and the
displacement-error metric.

Internally a dataset is held as two arrays: integer grid indices ``(n, 3)``
and measurement values ``(n, 7)`` in channel order
``x, y, z, q, phi_x, phi_y, phi_z``.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, InsufficientDataError, InvalidBoundsError

CHANNELS = ("x", "y", "z", "q", "phi_x", "phi_y", "phi_z")
N_CHANNELS = 7
ROLES = ("train", "validation", "evaluation")
PAIRINGS = ("all_pairs", "axis_neighbors")
CSV_HEADER = ("env", "role", "i", "j", "k") + CHANNELS


def canonical_angle(a):
    """Wrap degrees into [-180, 180)."""
    return (np.asarray(a, dtype=float) + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class MeasurementPoint:
    x: float
    y: float
    z: float
    q: float = 0.0
    phi_x: float = 0.0
    phi_y: float = 0.0
    phi_z: float = 0.0

    def __post_init__(self):
        if not self.q >= 0:
            raise DataError(f"quality estimate must be >= 0, got {self.q}")

    @classmethod
    def from_array(cls, v) -> "MeasurementPoint":
        v = np.asarray(v, dtype=float)
        if v.shape != (N_CHANNELS,):
            raise DataError(f"expected 7 channels, got shape {v.shape}")
        ang = canonical_angle(v[4:])
        return cls(*(float(c) for c in v[:4]), *(float(a) for a in ang))

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.q,
                         self.phi_x, self.phi_y, self.phi_z])

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class GroundTruthGrid:
    """Calibrated Lego board: studs ``pitch_xy`` apart, stacked at ``z_layers``."""

    pitch_xy: float = 8.0
    z_layers: tuple = (0.0, 9.6, 19.2)
    nx: int = 5
    ny: int = 4

    def __post_init__(self):
        object.__setattr__(self, "z_layers", tuple(float(z) for z in self.z_layers))
        if not self.pitch_xy > 0:
            raise DataError("pitch_xy must be positive")
        if self.nx < 2 or self.ny < 2:
            raise DataError("grid needs at least 2 studs per axis")
        if len(self.z_layers) < 1 or np.any(np.diff(self.z_layers) <= 0):
            raise DataError("z_layers must be strictly increasing")

    @property
    def nz(self) -> int:
        return len(self.z_layers)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz

    def contains(self, idx) -> bool:
        i, j, k = idx
        return 0 <= i < self.nx and 0 <= j < self.ny and 0 <= k < self.nz

    def indices(self) -> np.ndarray:
        """All indices in (k, j, i) lexicographic order, shape (size, 3)."""
        out = [(i, j, k) for k in range(self.nz) for j in range(self.ny) for i in range(self.nx)]
        return np.array(out, dtype=int)

    def true_positions(self, indices) -> np.ndarray:
        idx = np.atleast_2d(np.asarray(indices, dtype=int))
        z = np.asarray(self.z_layers)[idx[:, 2]]
        return np.column_stack([idx[:, 0] * self.pitch_xy, idx[:, 1] * self.pitch_xy, z])

    def true_position(self, idx) -> np.ndarray:
        return self.true_positions([idx])[0]

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.nx - 1) * self.pitch_xy / 2, (self.ny - 1) * self.pitch_xy / 2,
                         self.z_layers[0]])

    def to_json(self) -> dict:
        return {"pitch_xy": self.pitch_xy, "z_layers": list(self.z_layers),
                "nx": self.nx, "ny": self.ny}

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruthGrid":
        return cls(pitch_xy=float(d["pitch_xy"]), z_layers=tuple(d["z_layers"]),
                   nx=int(d["nx"]), ny=int(d["ny"]))


@dataclass
class Dataset:
    env_id: str
    role: str
    grid: GroundTruthGrid
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"unknown role {self.role!r}")
        self.indices = np.asarray(self.indices, dtype=int).reshape(-1, 3)
        self.values = np.asarray(self.values, dtype=float).reshape(-1, N_CHANNELS)
        if len(self.indices) != len(self.values):
            raise DataError("indices and values differ in length")
        if len({tuple(i) for i in self.indices}) != len(self.indices):
            raise DataError(f"duplicate grid index in dataset {self.env_id!r}")
        for idx in self.indices:
            if not self.grid.contains(idx):
                raise DataError(f"index {tuple(idx)} outside grid extent")
        if np.any(self.values[:, 3] < 0):
            raise DataError("negative quality estimate")
        self.values[:, 4:] = canonical_angle(self.values[:, 4:])

    def __len__(self):
        return len(self.indices)

    @property
    def samples(self) -> list:
        return [(tuple(int(c) for c in i), MeasurementPoint.from_array(v))
                for i, v in zip(self.indices, self.values)]

    @property
    def positions(self) -> np.ndarray:
        return self.values[:, :3]

    @property
    def true_positions(self) -> np.ndarray:
        return self.grid.true_positions(self.indices)

    def with_values(self, values) -> "Dataset":
        return Dataset(self.env_id, self.role, self.grid, self.indices.copy(), values)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.env_id, self.role, self.grid, self.indices[mask], self.values[mask])

    def layers(self, ks: Iterable[int]) -> "Dataset":
        """Restrict to the given z-layer indices."""
        return self.subset(np.isin(self.indices[:, 2], list(ks)))


# --- normalisation --------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationBounds:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if len(lo) != N_CHANNELS or len(hi) != N_CHANNELS:
            raise InvalidBoundsError("bounds need 7 channels")
        bad = [CHANNELS[c] for c in range(N_CHANNELS) if not hi[c] > lo[c]]
        if bad:
            raise InvalidBoundsError(f"max <= min on channel(s) {', '.join(bad)}")

    @property
    def lo_arr(self) -> np.ndarray:
        return np.array(self.lo)

    @property
    def span(self) -> np.ndarray:
        return np.array(self.hi) - np.array(self.lo)

    @classmethod
    def from_data(cls, values, margin: float = 0.0, min_span: float = 1e-6):
        """Per-channel min/max of ``values``; channels narrower than
        ``min_span`` are widened symmetrically so the bounds stay valid."""
        v = np.atleast_2d(np.asarray(values, dtype=float))
        lo, hi = v.min(axis=0), v.max(axis=0)
        pad = margin * (hi - lo)
        lo, hi = lo - pad, hi + pad
        narrow = (hi - lo) < min_span
        mid = (hi + lo) / 2
        lo = np.where(narrow, mid - min_span / 2, lo)
        hi = np.where(narrow, mid + min_span / 2, hi)
        return cls(tuple(lo), tuple(hi))

    def normalize(self, values) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.lo_arr) / self.span

    def denormalize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=float) * self.span + self.lo_arr

    def to_json(self) -> dict:
        return {"min": list(self.lo), "max": list(self.hi)}

    @classmethod
    def from_json(cls, d: dict) -> "NormalizationBounds":
        return cls(tuple(d["min"]), tuple(d["max"]))


@dataclass(frozen=True)
class NormalizedPoint:
    values: np.ndarray
    out_of_range: tuple = field(default=())

    @property
    def extrapolated(self) -> bool:
        return bool(self.out_of_range)


def normalize_point(p: MeasurementPoint, b: NormalizationBounds) -> NormalizedPoint:
    """Map to unit range per channel. Values are not clamped; channels that
    fall outside [0, 1] are listed in ``out_of_range``."""
    u = b.normalize(p.to_array())
    flagged = tuple(CHANNELS[c] for c in range(N_CHANNELS) if u[c] < 0 or u[c] > 1)
    return NormalizedPoint(u, flagged)


def denormalize_point(u, b: NormalizationBounds) -> MeasurementPoint:
    return MeasurementPoint.from_array(b.denormalize(u))


# --- displacement error ------------------------------------------------------------

@dataclass(frozen=True)
class DisplacementError:
    pair: tuple
    measured_dist: float
    true_dist: float

    @property
    def error(self) -> float:
        return abs(self.measured_dist - self.true_dist)


def pair_indices(indices, pairing: str = "all_pairs") -> np.ndarray:
    """Row-index pairs (a < b) for the given pairing rule, shape (m, 2)."""
    idx = np.asarray(indices, dtype=int)
    n = len(idx)
    if pairing == "all_pairs":
        a, b = np.triu_indices(n, k=1)
        return np.column_stack([a, b])
    if pairing == "axis_neighbors":
        diff = np.abs(idx[:, None, :] - idx[None, :, :])
        adjacent = (diff.sum(axis=2) == 1)
        a, b = np.nonzero(np.triu(adjacent, k=1))
        return np.column_stack([a, b])
    raise DataError(f"unknown pairing rule {pairing!r}")


def displacement_error_array(measured, true, pairs) -> np.ndarray:
    """Vectorised |measured distance - true distance| over ``pairs``."""
    measured = np.asarray(measured, dtype=float)
    true = np.asarray(true, dtype=float)
    a, b = pairs[:, 0], pairs[:, 1]
    dm = np.linalg.norm(measured[a] - measured[b], axis=1)
    dt = np.linalg.norm(true[a] - true[b], axis=1)
    return np.abs(dm - dt)


def displacement_errors(d: Dataset, pairing: str = "all_pairs") -> list[DisplacementError]:
    if pairing not in PAIRINGS:
        raise DataError(f"unknown pairing rule {pairing!r}")
    if len(d) < 2:
        raise InsufficientDataError("need at least 2 samples for displacements")
    pairs = pair_indices(d.indices, pairing)
    meas, true = d.positions, d.true_positions
    out = []
    for a, b in pairs:
        out.append(DisplacementError(
            pair=(tuple(int(c) for c in d.indices[a]), tuple(int(c) for c in d.indices[b])),
            measured_dist=float(np.linalg.norm(meas[a] - meas[b])),
            true_dist=float(np.linalg.norm(true[a] - true[b])),
        ))
    return out


def displacement_rmse(errors: Sequence) -> tuple[float, float]:
    """(RMSE, population standard deviation) of displacement errors.

    Accepts DisplacementError objects or plain numbers.
    """
    e = np.array([x.error if isinstance(x, DisplacementError) else x for x in errors], dtype=float)
    if e.size == 0:
        raise InsufficientDataError("no displacement errors")
    return float(np.sqrt(np.mean(e ** 2))), float(np.std(e))


def dataset_rmse(d: Dataset, pairing: str = "all_pairs", positions=None) -> tuple[float, float]:
    """Displacement RMSE/stddev of ``d`` (or of replacement ``positions``)."""
    if len(d) < 2:
        raise InsufficientDataError("need at least 2 samples for displacements")
    pos = d.positions if positions is None else np.asarray(positions)
    e = displacement_error_array(pos, d.true_positions, pair_indices(d.indices, pairing))
    return displacement_rmse(e)


# --- CSV / JSON IO -----------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def datasets_to_csv(datasets: Iterable[Dataset]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for d in datasets:
        for idx, v in zip(d.indices, d.values):
            w.writerow([d.env_id, d.role, *(int(c) for c in idx), *(_fmt(c) for c in v)])
    return buf.getvalue()


def datasets_from_csv(text: str, grid: GroundTruthGrid) -> list[Dataset]:
    """Parse CSV rows grouped by (env, role), preserving first-seen order."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise DataError(f"line 1: expected header {','.join(CSV_HEADER)}")
    groups: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            raise DataError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
        try:
            idx = tuple(int(c) for c in row[2:5])
            vals = [float(c) for c in row[5:]]
        except ValueError as exc:
            raise DataError(f"line {lineno}: {exc}") from None
        groups.setdefault((row[0], row[1]), ([], []))
        groups[(row[0], row[1])][0].append(idx)
        groups[(row[0], row[1])][1].append(vals)
    out = []
    for (env, role), (idx, vals) in groups.items():
        try:
            out.append(Dataset(env, role, grid, np.array(idx), np.array(vals)))
        except DataError as exc:
            raise DataError(f"dataset {env!r}: {exc}") from None
    return out


def save_datasets(datasets: Sequence[Dataset], out_dir, name: str = "datasets.csv") -> Path:
    """Write datasets CSV plus the ``grid.json`` sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = datasets[0].grid
    (out_dir / "grid.json").write_text(json.dumps(grid.to_json(), indent=2) + "\n")
    path = out_dir / name
    path.write_text(datasets_to_csv(datasets), encoding="utf-8")
    return path


def load_datasets(data_dir, name: str = "datasets.csv") -> list[Dataset]:
    data_dir = Path(data_dir)
    try:
        grid = GroundTruthGrid.from_json(json.loads((data_dir / "grid.json").read_text()))
    except (KeyError, ValueError) as exc:
        raise DataError(f"grid.json: {exc}") from None
    return datasets_from_csv((data_dir / name).read_text(encoding="utf-8"), grid)

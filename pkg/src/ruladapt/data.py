"""Run-to-failure data pipeline: parsing, normalization, windowing, splits.

Input files follow the turbofan benchmark layout: whitespace-separated rows
of ``unit cycle setting_1..3 sensor_1..21`` plus a one-value-per-line file of
true remaining cycles for each test engine.  Everything downstream works on
per-trajectory feature matrices, so the same machinery also serves synthetic
tasks with arbitrary feature counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .serialization import load_blob, save_blob

N_SETTINGS = 3
N_SENSORS = 21
N_FEATURES = N_SETTINGS + N_SENSORS
N_COLUMNS = 2 + N_FEATURES  # unit, cycle, settings, sensors

FEATURE_NAMES = tuple(
    [f"setting_{i}" for i in range(1, N_SETTINGS + 1)]
    + [f"s_{i}" for i in range(1, N_SENSORS + 1)]
)
ALL_FEATURES = tuple(range(N_FEATURES))
DEFAULT_RC = 125.0

SOURCE = "source"
TARGET = "target"


class ParseError(ValueError):
    """Malformed input row (wrong arity or non-numeric token)."""


class IntegrityError(ValueError):
    """Structurally valid file with inconsistent content."""


class SplitError(ValueError):
    """Not enough trajectories to split."""


# ---------------------------------------------------------------------------
# trajectories and parsing

@dataclass(frozen=True)
class Trajectory:
    """One engine's full cycle record; cycles are implicitly 1..T."""

    unit_id: int
    op_settings: np.ndarray  # (T, 3)
    sensors: np.ndarray  # (T, 21)

    def __post_init__(self):
        if self.op_settings.ndim != 2 or self.op_settings.shape[1] != N_SETTINGS:
            raise IntegrityError(f"unit {self.unit_id}: op_settings must be (T, {N_SETTINGS})")
        if self.sensors.ndim != 2 or self.sensors.shape[1] != N_SENSORS:
            raise IntegrityError(f"unit {self.unit_id}: sensors must be (T, {N_SENSORS})")
        if len(self.op_settings) != len(self.sensors) or len(self.sensors) == 0:
            raise IntegrityError(f"unit {self.unit_id}: inconsistent or empty cycle record")

    @property
    def length(self) -> int:
        return len(self.sensors)

    def features(self, mask: Sequence[int] | None = None) -> np.ndarray:
        """(T, f) matrix of the selected columns (settings first, then sensors)."""
        full = np.hstack([self.op_settings, self.sensors])
        if mask is None:
            return full
        return full[:, list(mask)]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Trajectory)
            and self.unit_id == other.unit_id
            and np.array_equal(self.op_settings, other.op_settings)
            and np.array_equal(self.sensors, other.sensors)
        )


def _read_numeric_rows(path: Path, n_columns: int) -> list[list[float]]:
    rows: list[list[float]] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != n_columns:
                raise ParseError(
                    f"{path}:{line_no}: expected {n_columns} columns, got {len(tokens)}"
                )
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise ParseError(f"{path}:{line_no}: non-numeric value ({exc})") from None
    if not rows:
        raise ParseError(f"{path}: empty file")
    return rows


def _group_trajectories(path: Path, rows: list[list[float]]) -> list[Trajectory]:
    by_unit: dict[int, list[list[float]]] = {}
    for row in rows:
        by_unit.setdefault(int(row[0]), []).append(row)
    trajectories = []
    for unit, unit_rows in by_unit.items():
        cycles = [int(r[1]) for r in unit_rows]
        if cycles != list(range(1, len(unit_rows) + 1)):
            raise IntegrityError(
                f"{path}: unit {unit}: cycle indices must run 1..T with step 1"
            )
        block = np.array([r[2:] for r in unit_rows], dtype=np.float64)
        trajectories.append(
            Trajectory(unit, block[:, :N_SETTINGS].copy(), block[:, N_SETTINGS:].copy())
        )
    return trajectories


def parse_trajectory_file(path) -> list[Trajectory]:
    path = Path(path)
    return _group_trajectories(path, _read_numeric_rows(path, N_COLUMNS))


def parse_rul_file(path) -> np.ndarray:
    path = Path(path)
    return np.array([r[0] for r in _read_numeric_rows(path, 1)], dtype=np.float64)


def parse_cmapss(train_path, test_path, rul_path):
    """Parse one subset's three flat files.

    Returns (train trajectories, test trajectories, true RUL vector); the RUL
    vector holds one value per test engine, in file order.
    """
    train = parse_trajectory_file(train_path)
    test = parse_trajectory_file(test_path)
    truth = parse_rul_file(rul_path)
    if len(truth) != len(test):
        raise IntegrityError(
            f"{rul_path}: {len(truth)} RUL values for {len(test)} test trajectories"
        )
    return train, test, truth


def format_trajectories(trajectories: Sequence[Trajectory]) -> str:
    """Serialize back to the flat layout; reparsing reproduces the input."""
    lines = []
    for traj in trajectories:
        block = np.hstack([traj.op_settings, traj.sensors])
        for t, row in enumerate(block, start=1):
            values = " ".join(repr(float(v)) for v in row)
            lines.append(f"{traj.unit_id} {t} {values}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# normalization

@dataclass(frozen=True)
class NormalizationStats:
    """Per-feature min/max fitted on one domain's training trajectories."""

    minimum: np.ndarray
    maximum: np.ndarray
    constant: np.ndarray  # bool mask of max == min columns
    fitted_on: str = ""

    def __post_init__(self):
        if np.any(self.maximum < self.minimum):
            raise IntegrityError("normalization stats with max < min")

    @property
    def width(self) -> int:
        return len(self.minimum)


def fit_normalization_matrix(matrices: Sequence[np.ndarray], fitted_on: str = "") -> NormalizationStats:
    if not matrices:
        raise ValueError("cannot fit normalization on an empty trajectory list")
    stacked = np.vstack(matrices)
    lo = stacked.min(axis=0)
    hi = stacked.max(axis=0)
    return NormalizationStats(lo, hi, hi == lo, fitted_on)


def fit_normalization(
    trajectories: Sequence[Trajectory],
    feature_mask: Sequence[int] | None = None,
    fitted_on: str = "",
) -> NormalizationStats:
    return fit_normalization_matrix(
        [t.features(feature_mask) for t in trajectories], fitted_on
    )


def normalize(x: float, j: int, stats: NormalizationStats) -> float:
    """Min-max scale one value of feature j; constant features map to 0."""
    if stats.constant[j]:
        return 0.0
    return (x - stats.minimum[j]) / (stats.maximum[j] - stats.minimum[j])


def denormalize(y: float, j: int, stats: NormalizationStats) -> float:
    if stats.constant[j]:
        return float(stats.minimum[j])
    return y * (stats.maximum[j] - stats.minimum[j]) + stats.minimum[j]


def normalize_matrix(features: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    span = np.where(stats.constant, 1.0, stats.maximum - stats.minimum)
    out = (features - stats.minimum) / span
    out[:, stats.constant] = 0.0
    return out


# ---------------------------------------------------------------------------
# labels and windows

def rul_label(T: int, t: int, rc: float) -> float:
    """Piecewise-linear scaled label: min(T - t, rc) / rc, in [0, 1]."""
    if rc <= 0:
        raise ValueError(f"rc must be positive, got {rc}")
    if not 1 <= t <= T:
        raise ValueError(f"cycle t={t} outside trajectory of length {T}")
    return min(T - t, rc) / rc


@dataclass(frozen=True)
class WindowSample:
    """One sliding window ending at `end_cycle` of a normalized trajectory.

    `matrix` is the trajectory's full (T, f) normalized feature matrix,
    shared across the trajectory's windows; `features` materializes the
    (f, K) slice, left-padding short trajectories by replicating the
    earliest cycle's row.
    """

    unit_id: int
    end_cycle: int
    window: int
    domain_tag: str
    rul_scaled: float | None
    matrix: np.ndarray = field(repr=False)

    @property
    def features(self) -> np.ndarray:
        end, K = self.end_cycle, self.window
        if end >= K:
            return self.matrix[end - K : end].T
        pad = np.repeat(self.matrix[:1], K - end, axis=0)
        return np.vstack([pad, self.matrix[:end]]).T


def make_windows(
    traj: Trajectory,
    K: int,
    stats: NormalizationStats,
    rc: float = DEFAULT_RC,
    *,
    domain_tag: str = SOURCE,
    labelled: bool = True,
    feature_mask: Sequence[int] | None = None,
) -> list[WindowSample]:
    """All stride-1 windows of a trajectory: T - K + 1 of them for T >= K,
    otherwise a single left-padded window ending at the last cycle."""
    if K < 1:
        raise ValueError(f"window length must be >= 1, got {K}")
    mat = normalize_matrix(traj.features(feature_mask), stats)
    return _windows_from_matrix(mat, traj.unit_id, K, rc, domain_tag, labelled)


def _windows_from_matrix(mat, unit_id, K, rc, domain_tag, labelled):
    T = len(mat)
    ends = range(K, T + 1) if T >= K else [T]
    return [
        WindowSample(
            unit_id=unit_id,
            end_cycle=t,
            window=K,
            domain_tag=domain_tag,
            rul_scaled=rul_label(T, t, rc) if labelled else None,
            matrix=mat,
        )
        for t in ends
    ]


def _eval_window(mat, unit_id, K, truth_rul, rc, domain_tag) -> WindowSample:
    """The single last window of a test trajectory, labeled from the provided
    true remaining cycles (capped at rc, scaled by rc)."""
    return WindowSample(
        unit_id=unit_id,
        end_cycle=len(mat),
        window=K,
        domain_tag=domain_tag,
        rul_scaled=min(float(truth_rul), rc) / rc,
        matrix=mat,
    )


def stack_windows(windows: Sequence[WindowSample], indices=None):
    """Gather windows into (n, f, K) features and (n, 1) labels (None if any
    window is unlabeled)."""
    chosen = windows if indices is None else [windows[i] for i in indices]
    X = np.stack([w.features for w in chosen])
    if any(w.rul_scaled is None for w in chosen):
        return X, None
    y = np.array([[w.rul_scaled] for w in chosen], dtype=np.float64)
    return X, y


# ---------------------------------------------------------------------------
# splits and datasets

def split_train_val(trajectories: Sequence, seed: int, fraction: float):
    """Engine-level split, deterministic in `seed`; returns (train, val)."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(trajectories)
    if n < 2:
        raise SplitError(f"need at least 2 trajectories to split, got {n}")
    n_val = min(max(1, round(n * fraction)), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [trajectories[i] for i in range(n) if i not in val_idx]
    val = [trajectories[i] for i in range(n) if i in val_idx]
    return train, val


@dataclass
class DomainDataset:
    """One domain's windows plus the stats and truth needed to evaluate on it."""

    subset: str
    role: str  # SOURCE or TARGET
    window: int
    rc: float
    stats: NormalizationStats
    train_windows: list[WindowSample]
    val_windows: list[WindowSample]
    test_windows: list[WindowSample]
    test_rul_truth: np.ndarray
    train_units: tuple[int, ...]
    val_units: tuple[int, ...]

    def __post_init__(self):
        if set(self.train_units) & set(self.val_units):
            raise IntegrityError("train and validation engines overlap")
        if len(self.test_windows) != len(self.test_rul_truth):
            raise IntegrityError(
                f"{len(self.test_windows)} evaluation windows for "
                f"{len(self.test_rul_truth)} truth values"
            )
        units = [w.unit_id for w in self.test_windows]
        if len(set(units)) != len(units):
            raise IntegrityError("more than one evaluation window for a test engine")

    @property
    def n_features(self) -> int:
        return self.stats.width


def _assemble_dataset(
    train_mats,  # list of (unit_id, raw (T, f) matrix)
    test_mats,
    test_truth,
    *,
    subset: str,
    role: str,
    window: int,
    rc: float,
    val_seed: int,
    val_fraction: float,
) -> DomainDataset:
    stats = fit_normalization_matrix([m for _, m in train_mats], fitted_on=f"{subset}/train")
    train_part, val_part = split_train_val(train_mats, val_seed, val_fraction)
    labelled = role == SOURCE

    def window_all(parts):
        out = []
        for unit, raw in parts:
            mat = normalize_matrix(raw, stats)
            out.extend(_windows_from_matrix(mat, unit, window, rc, role, labelled))
        return out

    test_truth = np.asarray(test_truth, dtype=np.float64)
    test_windows = [
        _eval_window(normalize_matrix(raw, stats), unit, window, truth, rc, role)
        for (unit, raw), truth in zip(test_mats, test_truth)
    ]
    return DomainDataset(
        subset=subset,
        role=role,
        window=window,
        rc=rc,
        stats=stats,
        train_windows=window_all(train_part),
        val_windows=window_all(val_part),
        test_windows=test_windows,
        test_rul_truth=test_truth,
        train_units=tuple(u for u, _ in train_part),
        val_units=tuple(u for u, _ in val_part),
    )


def build_domain_dataset(
    train_trajs: Sequence[Trajectory],
    test_trajs: Sequence[Trajectory],
    test_truth,
    *,
    subset: str,
    role: str,
    window: int,
    rc: float = DEFAULT_RC,
    feature_mask: Sequence[int] | None = None,
    val_seed: int = 42,
    val_fraction: float = 0.1,
) -> DomainDataset:
    if len(test_trajs) != len(np.atleast_1d(test_truth)):
        raise IntegrityError("test trajectory count does not match truth vector")
    return _assemble_dataset(
        [(t.unit_id, t.features(feature_mask)) for t in train_trajs],
        [(t.unit_id, t.features(feature_mask)) for t in test_trajs],
        test_truth,
        subset=subset,
        role=role,
        window=window,
        rc=rc,
        val_seed=val_seed,
        val_fraction=val_fraction,
    )


def dataset_from_matrices(
    train_mats,
    test_mats,
    test_truth,
    *,
    subset: str,
    role: str,
    window: int,
    rc: float,
    val_seed: int = 42,
    val_fraction: float = 0.1,
) -> DomainDataset:
    """Dataset over raw (unit_id, matrix) pairs; serves synthetic tasks whose
    feature count differs from the 24-column flat layout."""
    return _assemble_dataset(
        list(train_mats),
        list(test_mats),
        test_truth,
        subset=subset,
        role=role,
        window=window,
        rc=rc,
        val_seed=val_seed,
        val_fraction=val_fraction,
    )


# ---------------------------------------------------------------------------
# trajectory cache

def save_dataset_cache(path, train_trajs, test_trajs, test_truth, *, subset: str, config: dict) -> str:
    """Cache parsed trajectories plus the training normalization stats;
    returns the content hash of the file."""

    def pack(trajs, prefix):
        return {
            f"{prefix}_units": np.array([t.unit_id for t in trajs], dtype=np.int64),
            f"{prefix}_lengths": np.array([t.length for t in trajs], dtype=np.int64),
            f"{prefix}_settings": np.vstack([t.op_settings for t in trajs]),
            f"{prefix}_sensors": np.vstack([t.sensors for t in trajs]),
        }

    mask = config.get("feature_mask")
    stats = fit_normalization(train_trajs, mask, fitted_on=f"{subset}/train")
    arrays = {**pack(train_trajs, "train"), **pack(test_trajs, "test")}
    arrays["test_rul"] = np.asarray(test_truth, dtype=np.float64)
    arrays["stats_min"] = stats.minimum
    arrays["stats_max"] = stats.maximum
    arrays["stats_constant"] = stats.constant.astype(np.int8)
    meta = {
        "kind": "trajectory_cache",
        "subset": subset,
        "n_train": len(train_trajs),
        "n_test": len(test_trajs),
        "stats_fitted_on": stats.fitted_on,
        "config": config,
    }
    return save_blob(path, arrays, meta)


def load_dataset_cache(path):
    """Inverse of save_dataset_cache: (train, test, truth, stats, meta)."""
    arrays, meta = load_blob(path)
    if meta.get("kind") != "trajectory_cache":
        raise IntegrityError(f"{path}: not a trajectory cache")

    def unpack(prefix):
        units = arrays[f"{prefix}_units"]
        lengths = arrays[f"{prefix}_lengths"]
        settings = arrays[f"{prefix}_settings"]
        sensors = arrays[f"{prefix}_sensors"]
        out, offset = [], 0
        for unit, length in zip(units, lengths):
            out.append(
                Trajectory(
                    int(unit),
                    settings[offset : offset + length].copy(),
                    sensors[offset : offset + length].copy(),
                )
            )
            offset += length
        return out

    stats = NormalizationStats(
        arrays["stats_min"],
        arrays["stats_max"],
        arrays["stats_constant"].astype(bool),
        meta.get("stats_fitted_on", ""),
    )
    return unpack("train"), unpack("test"), arrays["test_rul"], stats, meta


def subset_paths(data_dir, subset: str) -> tuple[Path, Path, Path]:
    root = Path(data_dir)
    return (
        root / f"train_{subset}.txt",
        root / f"test_{subset}.txt",
        root / f"RUL_{subset}.txt",
    )

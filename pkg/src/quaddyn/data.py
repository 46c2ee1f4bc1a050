"""Flight trajectories: CSV ingestion, resampling, splits and windows.

Canonical CSV columns (SI units, Hamilton quaternion stored w first)::

    t, px, py, pz, vx, vy, vz, qw, qx, qy, qz, wx, wy, wz, u1, u2, u3, u4

``t`` in seconds, position in m, velocity in m/s (inertial frame), angular
velocity in rad/s (body frame), motor speeds in rpm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import quat

log = logging.getLogger(__name__)

ACTION_SCALE = 1e-3
SAMPLE_RATE = 100.0

FIELDS = {
    "t": ("t",),
    "p": ("px", "py", "pz"),
    "v": ("vx", "vy", "vz"),
    "q": ("qw", "qx", "qy", "qz"),
    "w": ("wx", "wy", "wz"),
    "u": ("u1", "u2", "u3", "u4"),
}
COLUMNS = [c for cols in FIELDS.values() for c in cols]

# published splits of the two public flight datasets (train, val, test)
PUBLISHED_SPLITS = {"pi-tcn": (54, 10, 4), "neurobem": (67, 17, 12)}


class IngestionError(ValueError):
    def __init__(self, path, message, row=None):
        self.path = str(path)
        self.row = row
        where = f" (row {row})" if row is not None else ""
        super().__init__(f"{path}{where}: {message}")


class ActionScalingError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class Trajectory:
    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    w: np.ndarray
    u: np.ndarray
    name: str = ""
    actions_scaled: bool = False
    truth: Trajectory | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.t)

    def states(self):
        """(N, 10) model state rows ``(v, omega, q)``."""
        return np.concatenate([self.v, self.w, self.q], axis=1)

    def actions(self):
        return self.u

    def scaled(self):
        """Copy with motor speeds multiplied by 1e-3; refuses a second scaling."""
        if self.actions_scaled:
            raise ActionScalingError(f"{self.name or 'trajectory'}: actions already scaled")
        return replace(self, u=self.u * ACTION_SCALE, actions_scaled=True)

    def unscaled_actions(self):
        return self.u / ACTION_SCALE if self.actions_scaled else self.u

    def to_frame(self):
        u = self.unscaled_actions()
        data = np.column_stack([self.t, self.p, self.v, self.q, self.w, u])
        return pd.DataFrame(data, columns=COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def slice(self, start, stop):
        return replace(
            self,
            t=self.t[start:stop], p=self.p[start:stop], v=self.v[start:stop],
            q=self.q[start:stop], w=self.w[start:stop], u=self.u[start:stop],
            truth=None if self.truth is None else self.truth.slice(start, stop),
        )


@dataclass
class Schema:
    """Maps source CSV columns onto canonical fields, with unit factors.

    ``columns`` maps canonical names (``t``, ``px`` ... ``u4``) to source
    column names.  Each ``*_scale`` multiplies the source values into SI
    (rpm for motors).  ``quat_convention`` is ``hamilton`` or ``jpl``.
    """

    columns: dict = field(default_factory=lambda: {c: c for c in COLUMNS})
    time_scale: float = 1.0
    position_scale: float = 1.0
    velocity_scale: float = 1.0
    angular_scale: float = 1.0
    motor_scale: float = 1.0
    quat_convention: str = "hamilton"

    @classmethod
    def from_file(cls, path):
        """Read a ``key = value`` schema file.

        Canonical column keys map to source column names; the other keys are
        the dataclass fields.  ``#`` starts a comment.
        """
        schema = cls()
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key in COLUMNS:
                schema.columns[key] = value
            elif key.endswith("_scale"):
                setattr(schema, key, float(value))
            elif key == "quat_convention":
                if value not in ("hamilton", "jpl"):
                    raise ValueError(f"{path}:{lineno}: quat_convention must be hamilton or jpl")
                schema.quat_convention = value
            else:
                raise ValueError(f"{path}:{lineno}: unknown schema key {key!r}")
        return schema


def ingest_csv(path, schema: Schema | None = None, resample_hz=None, name=None):
    """Load a trajectory CSV into SI units with continuous unit quaternions.

    Quaternions are normalized and sign-flipped wherever a row's dot product
    with the previous row is negative.  With ``resample_hz`` the result is
    resampled onto a uniform grid.
    """
    path = Path(path)
    schema = schema or Schema()
    if not path.exists():
        raise FileNotFoundError(
            f"{path} not found; download the PI-TCN or NeuroBEM flight logs and "
            "describe their columns with a schema file (see README, 'Datasets')"
        )
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [c for c in COLUMNS if schema.columns[c] not in frame.columns]
    if missing:
        names = ", ".join(f"{c} -> {schema.columns[c]!r}" for c in missing)
        raise IngestionError(path, f"missing columns: {names}")
    raw = {}
    for c in COLUMNS:
        col = pd.to_numeric(frame[schema.columns[c]], errors="coerce").to_numpy(dtype=float)
        bad = ~np.isfinite(col)
        if bad.any():
            row = int(np.argmax(bad))
            raise IngestionError(path, f"non-numeric or NaN value in column {schema.columns[c]!r}", row)
        raw[c] = col

    def group(key, scale=1.0):
        return np.column_stack([raw[c] for c in FIELDS[key]]) * scale

    t = raw["t"] * schema.time_scale
    steps = np.diff(t)
    if (steps <= 0).any():
        row = int(np.argmax(steps <= 0)) + 1
        raise IngestionError(path, "timestamps are not strictly increasing", row)
    q = group("q")
    norms = np.linalg.norm(q, axis=1)
    if (norms < 1e-8).any():
        raise IngestionError(path, "zero-norm quaternion", int(np.argmax(norms < 1e-8)))
    # rows already unit to 1e-12 are kept bit-exact so CSV round trips are lossless
    q = np.where(np.abs(norms - 1.0)[:, None] > 1e-12, q / norms[:, None], q)
    if schema.quat_convention == "jpl":
        q = quat.jpl_to_hamilton(q)
    traj = Trajectory(
        t=t,
        p=group("p", schema.position_scale),
        v=group("v", schema.velocity_scale),
        q=quat.make_continuous(q),
        w=group("w", schema.angular_scale),
        u=group("u", schema.motor_scale),
        name=name or path.stem,
    )
    if resample_hz is not None:
        traj = resample(traj, resample_hz)
    return traj


def load_trajectory(path):
    """Read a canonical CSV (as written by :meth:`Trajectory.to_csv`)."""
    return ingest_csv(path)


def resample(traj: Trajectory, rate_hz=SAMPLE_RATE):
    """Resample onto ``t0 + k / rate_hz``.

    Linear interpolation for position, velocities and motor speeds; slerp
    for the attitude.
    """
    dt = 1.0 / rate_hz
    t0, t1 = traj.t[0], traj.t[-1]
    n = int(np.floor((t1 - t0) / dt + 1e-9)) + 1
    t_new = t0 + dt * np.arange(n)
    t_new[-1] = min(t_new[-1], t1)

    def lin(arr):
        return np.column_stack([np.interp(t_new, traj.t, arr[:, i]) for i in range(arr.shape[1])])

    idx = np.clip(np.searchsorted(traj.t, t_new, side="right") - 1, 0, len(traj.t) - 2)
    span = traj.t[idx + 1] - traj.t[idx]
    frac = np.clip((t_new - traj.t[idx]) / span, 0.0, 1.0)
    q = quat.slerp(traj.q[idx], traj.q[idx + 1], frac)
    return replace(
        traj,
        t=t_new, p=lin(traj.p), v=lin(traj.v), q=quat.make_continuous(q),
        w=lin(traj.w), u=lin(traj.u),
        truth=None if traj.truth is None else resample(traj.truth, rate_hz),
    )


@dataclass
class WindowBatch:
    """Sliding windows: ``history`` past rows and ``horizon`` future rows.

    ``states``/``actions`` are (N, H, 10)/(N, H, 4); ``target_states`` and
    ``future_actions`` are the (N, U, .) rows that immediately follow.
    """

    states: np.ndarray
    actions: np.ndarray
    target_states: np.ndarray
    future_actions: np.ndarray
    traj_index: np.ndarray
    start: np.ndarray
    actions_scaled: bool = True

    def __len__(self):
        return len(self.states)

    @property
    def history(self):
        return self.states.shape[1]

    @property
    def horizon(self):
        return self.target_states.shape[1]

    def take(self, idx):
        idx = np.asarray(idx)
        return WindowBatch(
            self.states[idx], self.actions[idx], self.target_states[idx],
            self.future_actions[idx], self.traj_index[idx], self.start[idx],
            self.actions_scaled,
        )


def window_count(length, history, horizon, stride=1):
    n = length - history - horizon + 1
    return 0 if n <= 0 else (n - 1) // stride + 1


def make_windows(trajectories, history, horizon, stride=1):
    """Windows over every trajectory, never crossing trajectory boundaries.

    Motor speeds are scaled by 1e-3 unless the trajectory is already scaled.
    Trajectories shorter than ``history + horizon`` are skipped.
    """
    if history < 1 or horizon < 1 or stride < 1:
        raise ValueError("history, horizon and stride must be >= 1")
    parts = {k: [] for k in ("s", "a", "ts", "fa", "ti", "st")}
    for ti, traj in enumerate(trajectories):
        if not traj.actions_scaled:
            traj = traj.scaled()
        n = window_count(len(traj), history, horizon, stride)
        if n == 0:
            log.warning("skipping %s: %d samples < history %d + horizon %d",
                        traj.name or ti, len(traj), history, horizon)
            continue
        states, actions = traj.states(), traj.u
        starts = np.arange(n) * stride
        hist = starts[:, None] + np.arange(history)
        fut = starts[:, None] + history + np.arange(horizon)
        parts["s"].append(states[hist])
        parts["a"].append(actions[hist])
        parts["ts"].append(states[fut])
        parts["fa"].append(actions[fut])
        parts["ti"].append(np.full(n, ti))
        parts["st"].append(starts)
    if not parts["s"]:
        empty = np.zeros((0, history, 10))
        return WindowBatch(empty, np.zeros((0, history, 4)), np.zeros((0, horizon, 10)),
                           np.zeros((0, horizon, 4)), np.zeros(0, int), np.zeros(0, int))
    return WindowBatch(*(np.concatenate(parts[k]) for k in ("s", "a", "ts", "fa", "ti", "st")))


def batch_stream(windows: WindowBatch, batch_size, seed):
    """Endless seeded-shuffle minibatches, one permutation per epoch."""
    rng = np.random.default_rng(seed)
    n = len(windows)
    if n == 0:
        raise ValueError("no training windows")
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield windows.take(perm[i:i + batch_size])


def split(ids, counts=None, ratios=None, train=None, val=None, test=None, seed=0):
    """Partition trajectory ids into train/val/test at trajectory level.

    Give either ``counts`` (e.g. ``PUBLISHED_SPLITS['pi-tcn']``), ``ratios``, or
    explicit ``train``/``val``/``test`` lists.
    """
    ids = [] if ids is None else list(ids)
    if train is not None or val is not None or test is not None:
        parts = {"train": list(train or []), "val": list(val or []), "test": list(test or [])}
        seen = {}
        for name, part in parts.items():
            for i in part:
                if i in seen:
                    raise SplitError(f"{i!r} appears in both {seen[i]} and {name}")
                seen[i] = name
        unknown = set(seen) - set(ids) if ids else set()
        if unknown:
            raise SplitError(f"unknown trajectory ids: {sorted(map(str, unknown))}")
        return parts
    if counts is None:
        ratios = ratios or (0.8, 0.1, 0.1)
        n_train = int(round(ratios[0] * len(ids)))
        n_val = int(round(ratios[1] * len(ids)))
        counts = (n_train, n_val, len(ids) - n_train - n_val)
    if sum(counts) != len(ids) or min(counts) < 0:
        raise SplitError(f"split counts {tuple(counts)} do not partition {len(ids)} trajectories")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return {"train": shuffled[:a], "val": shuffled[a:b], "test": shuffled[b:]}


def write_split_manifest(path, splits):
    lines = []
    for name in ("train", "val", "test"):
        lines.append(f"[{name}]")
        lines.extend(str(i) for i in splits.get(name, []))
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_manifest(path):
    splits = {"train": [], "val": [], "test": []}
    current = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in splits:
                raise SplitError(f"{path}: unknown section {line}")
        elif current is None:
            raise SplitError(f"{path}: id {line!r} before any section")
        else:
            splits[current].append(line)
    return split(None, train=splits["train"], val=splits["val"], test=splits["test"])


def load_dataset(directory):
    """All ``*.csv`` trajectories in a directory, keyed by file stem."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(
            f"dataset directory {directory} not found; create one with "
            "`quaddyn gen-data` or `quaddyn ingest` (see README, 'Datasets')"
        )
    files = sorted(directory.glob("*.csv"))
    if not files:
        raise FileNotFoundError(f"{directory} contains no trajectory CSV files")
    return {f.stem: load_trajectory(f) for f in files}

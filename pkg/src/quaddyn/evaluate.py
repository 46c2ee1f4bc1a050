"""Open-loop rollout metrics, per-step error curves and ablation grids.

Units: δ_z, δ_v and δ_ω are mean squared errors in (m/s)² and (rad/s)²;
δ_q is the mean attitude error angle in radians.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import quat
from .data import WindowBatch, make_windows
from .models import model_config, PredictorModel, rollout

log = logging.getLogger(__name__)

METRICS = ("delta_z", "delta_v", "delta_omega", "delta_q")
REPORT_COLUMNS = ["traj_index", "traj_name", "start", "horizon", *METRICS]
CURVE_COLUMNS = [
    "step",
    "sq_z_mean", "sq_z_var",
    "sq_v_mean", "sq_v_var",
    "sq_omega_mean", "sq_omega_var",
    "theta_mean", "theta_var",
]


@dataclass
class RolloutReport:
    """Per-window rollout errors over a fixed horizon.

    ``sq_v``/``sq_omega`` hold squared errors per window and step,
    ``theta`` the attitude error angle, all shaped (windows, horizon).
    """

    horizon: int
    traj_index: np.ndarray
    start: np.ndarray
    sq_v: np.ndarray
    sq_omega: np.ndarray
    theta: np.ndarray
    traj_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.traj_index)

    @property
    def sq_z(self):
        return self.sq_v + self.sq_omega

    @property
    def delta_z(self):
        return self.sq_z.mean(axis=1)

    @property
    def delta_v(self):
        return self.sq_v.mean(axis=1)

    @property
    def delta_omega(self):
        return self.sq_omega.mean(axis=1)

    @property
    def delta_q(self):
        return self.theta.mean(axis=1)

    def summary(self):
        """Arithmetic means over all windows of all trajectories."""
        if len(self) == 0:
            return {k: math.nan for k in METRICS}
        return {k: float(np.mean(getattr(self, k))) for k in METRICS}

    def curve(self):
        """Mean and population variance over windows at each step 1..T."""
        out = {"step": np.arange(1, self.horizon + 1)}
        for key in ("sq_z", "sq_v", "sq_omega", "theta"):
            arr = getattr(self, key)
            out[key + "_mean"] = arr.mean(axis=0)
            out[key + "_var"] = arr.var(axis=0)
        return out

    def name_of(self, ti):
        return self.traj_names[ti] if ti < len(self.traj_names) else str(ti)

    def rows(self):
        per = {k: getattr(self, k) for k in METRICS}
        for i in range(len(self)):
            ti = int(self.traj_index[i])
            row = {"traj_index": ti, "traj_name": self.name_of(ti),
                   "start": int(self.start[i]), "horizon": self.horizon}
            row.update({k: float(per[k][i]) for k in METRICS})
            yield row

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})

    def curve_to_csv(self, path):
        write_curve_csv(self.curve(), path)


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for i in range(len(curve["step"])):
            writer.writerow([int(curve["step"][i])] + [repr(float(curve[c][i])) for c in CURVE_COLUMNS[1:]])


def _rollout_chunks(model, windows: WindowBatch, horizon, chunk):
    preds = []
    for i in range(0, len(windows), chunk):
        part = windows.take(np.arange(i, min(i + chunk, len(windows))))
        preds.append(rollout(model, part.states, part.actions, part.future_actions, horizon))
    return np.concatenate(preds) if preds else np.zeros((0, horizon, 10))


def evaluate_windows(model: PredictorModel, windows: WindowBatch, horizon=60, chunk=256,
                     traj_names=None) -> RolloutReport:
    """Roll out every window for ``horizon`` steps with ground-truth actions.

    The model is evaluated in inference mode and left in the mode it was in.
    """
    if windows.horizon < horizon:
        raise ValueError(f"windows carry {windows.horizon} future rows < horizon {horizon}")
    was_training = model.training
    model.eval()
    try:
        pred = _rollout_chunks(model, windows, horizon, chunk)
    finally:
        model.train(was_training)
    truth = windows.target_states[:, :horizon]
    err = truth[..., :6] - pred[..., :6]
    return RolloutReport(
        horizon=horizon,
        traj_index=windows.traj_index.copy(),
        start=windows.start.copy(),
        sq_v=np.sum(err[..., 0:3] ** 2, axis=-1),
        sq_omega=np.sum(err[..., 3:6] ** 2, axis=-1),
        theta=quat.error_angle(truth[..., 6:10], pred[..., 6:10]),
        traj_names=list(traj_names or []),
    )


def evaluate(model: PredictorModel, trajectories, history=None, horizon=60, stride=10,
             chunk=256) -> RolloutReport:
    """Sliding-window open-loop evaluation over test trajectories.

    Trajectories shorter than ``history + horizon`` are excluded (logged).
    """
    history = model.history if history is None else history
    if history != model.history:
        raise ValueError(f"history {history} does not match model history {model.history}")
    windows = make_windows(trajectories, history, horizon, stride)
    names = [t.name or str(i) for i, t in enumerate(trajectories)]
    return evaluate_windows(model, windows, horizon, chunk, names)


def per_step_error_curve(model, trajectories, history=None, horizon=60, stride=10):
    """Step-k mean and variance of the squared errors over all windows."""
    return evaluate(model, trajectories, history, horizon, stride).curve()


def mean_reports(summaries):
    """Average metric dicts (e.g. one per seed)."""
    return {k: float(np.mean([s[k] for s in summaries])) for k in METRICS}


# ---------------------------------------------------------------- ablations

SEQUENCE_ARCHS = ("lstm", "gru", "tcn")
MASK_LABELS = {(True, True, True): "v,w,q", (True, False, False): "v",
               (True, True, False): "v,w", (True, False, True): "v,q"}


def mask_label(mask):
    mask = tuple(bool(m) for m in mask)
    return MASK_LABELS.get(mask) or ",".join(n for n, on in zip(("v", "w", "q"), mask) if on)


def parse_mask(text):
    names = {s.strip() for s in text.split(",") if s.strip()}
    unknown = names - {"v", "w", "q"}
    if unknown:
        raise ValueError(f"unknown feature group(s) {sorted(unknown)}; use v, w, q")
    return ("v" in names, "w" in names, "q" in names)


@dataclass(frozen=True)
class GridCell:
    arch: str
    history: int
    unroll: int
    head: str = "decoupled"
    mask: tuple = (True, True, True)

    def invalid_reason(self):
        if self.arch in SEQUENCE_ARCHS and self.history <= 1:
            return "sequence encoders need history > 1"
        return None

    @property
    def label(self):
        return f"{self.arch} H={self.history} U={self.unroll} {self.head} [{mask_label(self.mask)}]"


def grid_cells(archs, histories, unrolls, heads=("decoupled",), masks=((True, True, True),)):
    return [GridCell(a, h, u, hd, tuple(m))
            for m in masks for hd in heads for h in histories for u in unrolls for a in archs]


def run_cell(cell: GridCell, seed, train_trajs, test_trajs, train_config, preset="desk",
             val_trajs=None, horizon=60, stride=10):
    """Train one grid cell for one seed and evaluate it; returns a summary dict."""
    from .train import TrainConfig, train

    cfg = TrainConfig(**{**asdict(train_config), "unroll": cell.unroll, "seed": seed})
    mcfg = model_config(cell.arch, cell.history, cell.head, preset, cell.mask)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = PredictorModel(mcfg, seed=seed)
    train_windows = make_windows(train_trajs, cell.history, cell.unroll, 1)
    val_windows = None
    if val_trajs:
        val_windows = make_windows(val_trajs, cell.history, cfg.val_horizon, stride)
    train(model, train_windows, cfg, val_windows)
    return evaluate(model, test_trajs, cell.history, horizon, stride).summary()


def _run_job(args):
    return run_cell(*args)


@dataclass
class AblationTable:
    cells: list
    seeds: list
    results: dict  # (cell, seed) -> summary; absent for invalid cells
    horizon: int = 60

    def cell_mean(self, cell):
        if cell.invalid_reason():
            return None
        return mean_reports([self.results[(cell, s)] for s in self.seeds])

    def rows(self):
        for cell in self.cells:
            row = {"arch": cell.arch, "history": cell.history, "unroll": cell.unroll,
                   "head": cell.head, "inputs": mask_label(cell.mask)}
            mean = self.cell_mean(cell)
            for k in METRICS:
                row[k] = "" if mean is None else mean[k]
            for s in self.seeds:
                res = self.results.get((cell, s))
                for k in ("delta_v", "delta_q"):
                    row[f"{k}_seed{s}"] = "" if res is None else res[k]
            yield row

    def columns(self):
        cols = ["arch", "history", "unroll", "head", "inputs", *METRICS]
        return cols + [f"{k}_seed{s}" for s in self.seeds for k in ("delta_v", "delta_q")]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns())
            writer.writeheader()
            for row in self.rows():
                writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})

    def format_text(self, metric_pair=("delta_v", "delta_q")):
        """Rows keyed by (head, inputs, H, U), one δ_v/δ_q column pair per
        architecture; blanks mark cells that cannot be built."""
        archs = list(dict.fromkeys(c.arch for c in self.cells))
        keys = list(dict.fromkeys((c.head, mask_label(c.mask), c.history, c.unroll) for c in self.cells))
        lookup = {(c.head, mask_label(c.mask), c.history, c.unroll, c.arch): c for c in self.cells}
        a, b = metric_pair
        head = f"{'head':<11} {'inputs':<6} {'H':>3} {'U':>3} |" + "".join(
            f" {arch.upper():^21} |" for arch in archs)
        sub = " " * 28 + "|" + "".join(f" {a:>10} {b:>10} |" for _ in archs)
        lines = [head, sub, "-" * len(head)]
        for hd, inp, h, u in keys:
            line = f"{hd:<11} {inp:<6} {h:>3} {u:>3} |"
            for arch in archs:
                cell = lookup.get((hd, inp, h, u, arch))
                mean = None if cell is None else self.cell_mean(cell)
                if mean is None:
                    line += f" {'-':>10} {'-':>10} |"
                else:
                    line += f" {mean[a]:>10.4g} {mean[b]:>10.4g} |"
            lines.append(line)
        lines.append(f"{a}: mean squared velocity error (m/s)^2; {b}: mean attitude error (rad); "
                     f"mean of {len(self.seeds)} seed(s) over {self.horizon}-step rollouts")
        return "\n".join(lines)


def ablation_grid(train_trajs, test_trajs, cells, seeds, train_config, preset="desk",
                  val_trajs=None, horizon=60, stride=10, jobs=1) -> AblationTable:
    """Train and evaluate every valid (cell, seed) pair.

    Invalid cells are kept in the table as blanks.  With ``jobs > 1`` the
    pairs run in worker processes; results are gathered in grid order.
    """
    seeds = list(seeds)
    jobs_list = []
    for cell in cells:
        reason = cell.invalid_reason()
        if reason:
            log.info("blank cell %s: %s", cell.label, reason)
            continue
        for s in seeds:
            jobs_list.append((cell, s, train_trajs, test_trajs, train_config, preset,
                              val_trajs, horizon, stride))
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_job, jobs_list))
    else:
        outputs = [_run_job(j) for j in jobs_list]
    results = {(j[0], j[1]): out for j, out in zip(jobs_list, outputs)}
    return AblationTable(list(cells), seeds, results, horizon)

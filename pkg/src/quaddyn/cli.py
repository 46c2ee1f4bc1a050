"""``quaddyn`` command-line entry point.

Subcommands: gen-data, ingest, train, eval, ablate, bench-inference.
Settings resolve as command-line flags > ``--config`` file > defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
import warnings
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dp
from . import evaluate as ev
from . import models as mz
from . import sim
from .config import ConfigError, merge, read_config, write_config
from .train import UNSTABLE_UNROLL, TrainConfig, TrainingInstabilityError, train

log = logging.getLogger("quaddyn")


class CLIError(Exception):
    pass


# name -> (default, type, help with units)
MODEL_SETTINGS = {
    "arch": ("tcn", str, "encoder: mlp, lstm, gru or tcn"),
    "history": (20, int, "history length H [samples at 100 Hz]"),
    "head": ("decoupled", str, "predictor head: full_state, multi_head or decoupled"),
    "inputs": ("v,w,q", str, "state groups fed to the encoder, comma list of v, w, q "
               "(motor speeds always included)"),
    "preset": ("full", str, "layer widths: full (published size) or desk (small, CPU friendly)"),
}
TRAIN_SETTINGS = {
    "unroll": (1, int, "multi-step loss horizon U [steps]"),
    "iterations": (50_000, int, "optimizer iterations [count]"),
    "batch_size": (512, int, "windows per minibatch [count]"),
    "lr_peak": (3e-4, float, "peak learning rate [dimensionless]"),
    "warmup_iters": (5_000, int, "constant-rate warmup length [iterations]"),
    "beta1": (0.9, float, "AdamW first-moment decay [dimensionless]"),
    "beta2": (0.999, float, "AdamW second-moment decay [dimensionless]"),
    "eps": (1e-8, float, "AdamW epsilon [dimensionless]"),
    "weight_decay": (1e-4, float, "decoupled weight decay [per unit learning rate]"),
    "grad_clip": (None, float, "global gradient-norm clip [L2 norm]; default 10 when U > 5, "
                  "0 disables"),
    "seed": (0, int, "random seed for init and data order [integer]"),
    "eval_interval": (500, int, "validation period [iterations]"),
    "val_windows": (256, int, "validation subset size [windows]"),
    "val_horizon": (60, int, "validation rollout length [steps at 100 Hz]"),
}
EVAL_SETTINGS = {
    "horizon": (60, int, "open-loop rollout length T [steps at 100 Hz]"),
    "stride": (10, int, "spacing between evaluation windows [samples]"),
}


def _coerce(value, typ):
    if value is None or not isinstance(value, str):
        return value
    if value.strip().lower() in ("", "none"):
        return None
    try:
        return typ(value)
    except ValueError:
        raise CLIError(f"cannot read {value!r} as {typ.__name__}") from None


def _add_settings(parser, settings, aliases=None):
    aliases = aliases or {}
    for name, (default, typ, text) in settings.items():
        flags = ["--" + name.replace("_", "-")] + aliases.get(name, [])
        parser.add_argument(*flags, dest=name, type=typ, default=None,
                            help=f"{text} (default: {'auto' if default is None else default})")


def _resolve(args, *settings):
    defaults, types = {}, {}
    for table in settings:
        for name, (default, typ, _) in table.items():
            defaults[name] = default
            types[name] = typ
    file_values = {}
    if getattr(args, "config", None):
        raw = read_config(args.config)
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ConfigError(f"{args.config}: unknown setting(s) {unknown}")
        file_values = {k: _coerce(v, types[k]) for k, v in raw.items()}
    flags = {k: getattr(args, k, None) for k in defaults}
    return merge(defaults, file_values, flags)


def _train_config(settings):
    names = {f.name for f in fields(TrainConfig)}
    cfg = {k: v for k, v in settings.items() if k in names and v is not None}
    return TrainConfig(**cfg)


def _check_unroll(unroll, allow_unstable):
    if unroll > UNSTABLE_UNROLL and not allow_unstable:
        raise CLIError(
            f"--unroll {unroll} exceeds {UNSTABLE_UNROLL}: multi-step training beyond "
            f"{UNSTABLE_UNROLL} steps was reported to become unstable because of large "
            "gradients; pass --allow-unstable to run it anyway"
        )


# ---------------------------------------------------------------- run plumbing


def _run_dir(args, command, seed):
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path(args.runs_root) / f"{stamp}-seed{seed}-{command}"
    _prepare_output(path, args.force, directory=True)
    return path


def _prepare_output(path, force, directory=False):
    path = Path(path)
    if path.exists() and (not directory or any(path.iterdir())):
        if not force:
            raise CLIError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    if directory:
        path.mkdir(parents=True, exist_ok=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(run_dir, command, settings, seed, datasets, started, checkpoint=None,
                   params_sha256=None, outputs=None, extra=None):
    manifest = {
        "command": command,
        "quaddyn_version": __version__,
        "argv": sys.argv[1:],
        "config": settings,
        "seed": seed,
        "datasets": datasets,
        "checkpoint": None if checkpoint is None else str(checkpoint),
        "params_sha256": params_sha256,
        "outputs": sorted(outputs or []),
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    path = Path(run_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _load_split(data_dir, part):
    """Trajectories of one split plus their file hashes.

    Without a ``splits.txt`` every trajectory belongs to every split.
    """
    data_dir = Path(data_dir)
    trajs = dp.load_dataset(data_dir)
    manifest = data_dir / "splits.txt"
    names = sorted(trajs)
    if manifest.is_file():
        names = dp.read_split_manifest(manifest)[part]
        missing = [n for n in names if n not in trajs]
        if missing:
            raise CLIError(f"{manifest}: no CSV for {missing}")
    hashes = {n: file_sha256(data_dir / f"{n}.csv") for n in names}
    return [trajs[n] for n in names], hashes


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args):
    kinds = sim.REFERENCE_KINDS[1:] if args.traj_kind == "mixed" else (args.traj_kind,)
    noise = {k: s * args.noise_sigma for k, s in sim.NOISE_PROFILE.items()} if args.noise_sigma else {}
    overrides = {"disturbance_sigma": args.disturbance_sigma, "noise_sigma": noise}
    out = Path(args.out or f"data/{args.traj_kind}_seed{args.seed}.csv")
    single = args.n_traj == 1 and out.suffix == ".csv"
    if single:
        _prepare_output(out, args.force)
        cfg = sim.SimConfig(reference=kinds[0], speed_scale=args.speed_scale, **overrides)
        traj = sim.simulate(cfg, args.duration, seed=args.seed, name=out.stem)
        traj.to_csv(out)
        print(f"wrote {len(traj)} samples to {out}")
        return 0
    _prepare_output(out, args.force, directory=True)
    lo, hi = args.speed_range if args.speed_range else (args.speed_scale, args.speed_scale)
    trajs = sim.make_dataset(args.n_traj, args.duration, args.seed, kinds=kinds,
                             speed_range=(lo, hi), **overrides)
    for traj in trajs:
        traj.to_csv(out / f"{traj.name}.csv")
    ids = [t.name for t in trajs]
    counts = tuple(args.split) if args.split else None
    dp.write_split_manifest(out / "splits.txt", dp.split(ids, counts=counts, seed=args.seed))
    print(f"wrote {len(trajs)} trajectories ({sum(len(t) for t in trajs)} samples) to {out}")
    return 0


# ---------------------------------------------------------------- ingest


def cmd_ingest(args):
    src = Path(args.input)
    if not src.exists():
        raise FileNotFoundError(
            f"{src} not found. The open-source flight logs (PI-TCN and NeuroBEM) must be "
            "downloaded separately; see README, 'Datasets', for sources and schema files"
        )
    files = sorted(src.glob("*.csv")) if src.is_dir() else [src]
    if not files:
        raise CLIError(f"no CSV files in {src}")
    schema = dp.Schema.from_file(args.schema) if args.schema else None
    out = _prepare_output(args.out, args.force, directory=True)
    ids = []
    for f in files:
        traj = dp.ingest_csv(f, schema, resample_hz=args.resample_hz, name=f.stem)
        traj.to_csv(out / f"{f.stem}.csv")
        ids.append(f.stem)
    if args.published_split:
        counts = dp.PUBLISHED_SPLITS[args.published_split]
    else:
        counts = tuple(args.split) if args.split else None
    dp.write_split_manifest(out / "splits.txt", dp.split(ids, counts=counts, seed=args.seed))
    print(f"ingested {len(ids)} trajectories into {out}")
    return 0


# ---------------------------------------------------------------- train


def _model_from_settings(s):
    mask = ev.parse_mask(s["inputs"])
    return mz.model_config(s["arch"], s["history"], s["head"], s["preset"], mask)


def cmd_train(args):
    s = _resolve(args, MODEL_SETTINGS, TRAIN_SETTINGS)
    _check_unroll(s["unroll"], args.allow_unstable)
    cfg = _train_config(s)
    mcfg = _model_from_settings(s)
    train_trajs, train_hash = _load_split(args.data, "train")
    val_trajs, val_hash = _load_split(args.data, "val")
    run = _run_dir(args, "train", cfg.seed)
    started = _now()
    write_config(run / "config.txt", s, header="resolved training settings")

    model = mz.PredictorModel(mcfg, seed=cfg.seed)
    windows = dp.make_windows(train_trajs, mcfg.encoder.history, cfg.unroll, 1)
    val_windows = dp.make_windows(val_trajs, mcfg.encoder.history, cfg.val_horizon, 10) if val_trajs else None
    if val_windows is not None and len(val_windows) == 0:
        val_windows = None
    log.info("training on %d windows (%d parameters)", len(windows), mz.count_parameters(model))

    def progress(it, loss):
        if (it + 1) % max(1, cfg.iterations // 20) == 0:
            log.info("iteration %d/%d loss %.6g", it + 1, cfg.iterations, loss)

    ckpt = run / "checkpoint"
    try:
        train(model, windows, cfg, val_windows, checkpoint_dir=ckpt,
              log_path=run / "train_log.csv", progress=progress)
    except TrainingInstabilityError as exc:
        raise CLIError(str(exc)) from None
    write_manifest(run, "train", s, cfg.seed, {"train": train_hash, "val": val_hash}, started,
                   checkpoint=ckpt, params_sha256=mz.params_hash(model),
                   outputs=["config.txt", "train_log.csv", "checkpoint"])
    print(f"run directory: {run}")
    return 0


# ---------------------------------------------------------------- eval


def _resolve_checkpoint(path):
    path = Path(path)
    if (path / "model.json").is_file():
        return path
    if (path / "checkpoint" / "model.json").is_file():
        return path / "checkpoint"
    raise CLIError(f"{path} holds no checkpoint (expected model.json)")


def cmd_eval(args):
    s = _resolve(args, EVAL_SETTINGS)
    ckpt = _resolve_checkpoint(args.checkpoint)
    model = mz.load_checkpoint(ckpt)
    trajs, hashes = _load_split(args.data, args.split)
    run = _run_dir(args, "eval", args.seed)
    started = _now()
    report = ev.evaluate(model, trajs, model.history, s["horizon"], s["stride"])
    if len(report) == 0:
        raise CLIError(
            f"no {args.split} trajectory is long enough for history {model.history} "
            f"+ horizon {s['horizon']}"
        )
    report.to_csv(run / "report.csv")
    report.curve_to_csv(run / "curve.csv")
    summary = report.summary()
    (run / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(run, "eval", {**s, "split": args.split}, args.seed, {args.split: hashes},
                   started, checkpoint=ckpt, params_sha256=mz.params_hash(model),
                   outputs=["report.csv", "curve.csv", "summary.json"],
                   extra={"metrics": summary, "windows": len(report)})
    print(format_summary(summary, len(report), s["horizon"]))
    print(f"run directory: {run}")
    return 0


def format_summary(summary, n_windows, horizon):
    lines = [f"{n_windows} windows, {horizon}-step open-loop rollouts"]
    units = {"delta_z": "(m/s)^2 + (rad/s)^2", "delta_v": "(m/s)^2",
             "delta_omega": "(rad/s)^2", "delta_q": "rad"}
    for k in ev.METRICS:
        lines.append(f"  {k:<12} {summary[k]:.6g} {units[k]}")
    return "\n".join(lines)


# ---------------------------------------------------------------- ablate


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_ablate(args):
    s = _resolve(args, TRAIN_SETTINGS)
    if max(args.unrolls) > UNSTABLE_UNROLL:
        _check_unroll(max(args.unrolls), args.allow_unstable)
    masks = [ev.parse_mask(m) for m in args.inputs.split(";")]
    cells = ev.grid_cells(args.archs, args.histories, args.unrolls, args.heads, masks)
    base = _train_config(s)
    train_trajs, train_hash = _load_split(args.data, "train")
    val_trajs, val_hash = _load_split(args.data, "val")
    test_trajs, test_hash = _load_split(args.data, "test")
    run = _run_dir(args, "ablate", args.seeds[0])
    started = _now()
    write_config(run / "config.txt", {**s, "archs": args.archs, "histories": args.histories,
                                      "unrolls": args.unrolls, "heads": args.heads,
                                      "inputs": args.inputs, "seeds": args.seeds,
                                      "preset": args.preset}, header="resolved ablation settings")
    table = ev.ablation_grid(train_trajs, test_trajs, cells, args.seeds, base, args.preset,
                             val_trajs or None, args.horizon, args.stride, args.jobs)
    table.to_csv(run / "ablation.csv")
    text = table.format_text()
    (run / "ablation.txt").write_text(text + "\n")
    write_manifest(run, "ablate", s, args.seeds, {"train": train_hash, "val": val_hash,
                                                  "test": test_hash}, started,
                   outputs=["config.txt", "ablation.csv", "ablation.txt"])
    print(text)
    print(f"run directory: {run}")
    return 0


# ---------------------------------------------------------------- bench-inference


def cmd_bench(args):
    rows = []
    rng = np.random.default_rng(0)
    for arch in args.archs:
        h = max(args.history, 2) if arch in ev.SEQUENCE_ARCHS else args.history
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = mz.PredictorModel(mz.model_config(arch, h, args.head, args.preset)).eval()
        states = np.zeros((1, h, mz.STATE_DIM))
        states[..., 6] = 1.0
        states[..., :6] = rng.normal(size=(1, h, 6))
        actions = rng.normal(size=(1, h, mz.ACTION_DIM))
        mz.predict_one_step(model, states, actions)
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            mz.predict_one_step(model, states, actions)
            times.append(time.perf_counter() - t0)
        rows.append({"arch": arch, "history": h, "head": args.head, "preset": args.preset,
                     "parameters": mz.count_parameters(model),
                     "latency_ms_median": 1e3 * float(np.median(times)),
                     "latency_ms_p90": 1e3 * float(np.percentile(times, 90))})
    print(f"{'arch':<6} {'H':>3} {'parameters':>12} {'median ms':>10} {'p90 ms':>10}")
    for r in rows:
        print(f"{r['arch']:<6} {r['history']:>3} {r['parameters']:>12,} "
              f"{r['latency_ms_median']:>10.3f} {r['latency_ms_p90']:>10.3f}")
    print("single-sample latency of the numpy implementation on this host; "
          "not representative of embedded hardware")
    if args.out:
        import csv

        out = _prepare_output(args.out, args.force)
        with open(out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return 0


# ---------------------------------------------------------------- parser


def _add_run_args(p):
    p.add_argument("--run-dir", help="explicit output directory (default: "
                   "<runs-root>/<timestamp>-seed<seed>-<command>)")
    p.add_argument("--runs-root", default="runs", help="parent of generated run directories "
                   "(default: runs)")
    p.add_argument("--force", action="store_true", help="overwrite an existing output location")


def build_parser():
    parser = argparse.ArgumentParser(prog="quaddyn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate synthetic flights to canonical CSV")
    p.add_argument("--traj-kind", default="ellipse", choices=sim.REFERENCE_KINDS + ("mixed",),
                   help="reference curve; mixed cycles through all moving kinds (default: ellipse)")
    p.add_argument("--speed-scale", type=float, default=1.0,
                   help="reference speed multiplier [dimensionless] (default: 1.0)")
    p.add_argument("--speed-range", type=float, nargs=2, metavar=("LO", "HI"),
                   help="draw each trajectory's speed multiplier uniformly from [LO, HI] "
                   "[dimensionless]; datasets only")
    p.add_argument("--duration", type=float, default=30.0,
                   help="flight length [s]; 100 samples per second (default: 30)")
    p.add_argument("--noise-sigma", type=float, default=0.0,
                   help="sensor noise level as a multiple of the reference profile "
                   "(v, w: 0.01 m/s, rad/s; p: 0.002 m; q: 0.002 rad; motors: 20 rpm) "
                   "[dimensionless]; 0 = noise free (default: 0)")
    p.add_argument("--disturbance-sigma", type=float, default=0.0,
                   help="std of the slowly varying external force [N] (default: 0)")
    p.add_argument("--n-traj", type=int, default=1,
                   help="number of trajectories [count]; > 1 writes a dataset directory")
    p.add_argument("--split", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="trajectory counts per split [count] (default: 80/10/10 percent)")
    p.add_argument("--seed", type=int, default=0, help="random seed [integer] (default: 0)")
    p.add_argument("--out", help="output .csv file, or dataset directory "
                   "(default: data/<kind>_seed<seed>.csv)")
    p.add_argument("--force", action="store_true", help="overwrite existing output")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="convert recorded flight CSVs to the canonical format")
    p.add_argument("--input", required=True, help="CSV file or directory of CSV files")
    p.add_argument("--schema", help="key=value column-mapping file (default: canonical names, "
                   "SI units)")
    p.add_argument("--resample-hz", type=float, default=dp.SAMPLE_RATE,
                   help="output sample rate [Hz] (default: 100)")
    p.add_argument("--split", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"),
                   help="trajectory counts per split [count] (default: 80/10/10 percent)")
    p.add_argument("--published-split", choices=sorted(dp.PUBLISHED_SPLITS),
                   help="published split sizes for the named dataset")
    p.add_argument("--seed", type=int, default=0, help="split shuffle seed [integer]")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--force", action="store_true", help="overwrite existing output")
    p.set_defaults(func=cmd_ingest)

    aliases = {"history": ["--H"], "unroll": ["--U"]}
    p = sub.add_parser("train", help="train one predictor")
    p.add_argument("--data", required=True, help="dataset directory (CSV files + splits.txt)")
    p.add_argument("--config", help="key=value settings file; flags override it")
    _add_settings(p, MODEL_SETTINGS, aliases)
    _add_settings(p, TRAIN_SETTINGS, aliases)
    p.add_argument("--allow-unstable", action="store_true",
                   help=f"permit --unroll above {UNSTABLE_UNROLL} steps")
    _add_run_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="open-loop rollout evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint or training run directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", default="test", choices=("train", "val", "test"),
                   help="which split to evaluate (default: test)")
    p.add_argument("--config", help="key=value settings file; flags override it")
    _add_settings(p, EVAL_SETTINGS)
    p.add_argument("--seed", type=int, default=0, help="label for the run directory [integer]")
    _add_run_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="key=value training settings file; flags override it")
    p.add_argument("--archs", type=_str_list, default=["mlp", "tcn"],
                   help="comma list of encoders (default: mlp,tcn)")
    p.add_argument("--histories", "--H", dest="histories", type=_int_list, default=[1, 20],
                   help="comma list of history lengths [samples] (default: 1,20)")
    p.add_argument("--unrolls", "--U", dest="unrolls", type=_int_list, default=[1, 10],
                   help="comma list of unroll lengths [steps] (default: 1,10)")
    p.add_argument("--heads", type=_str_list, default=["decoupled"],
                   help="comma list of predictor heads (default: decoupled)")
    p.add_argument("--inputs", default="v,w,q",
                   help="semicolon list of input groups, e.g. 'v;v,w;v,w,q' (default: v,w,q)")
    p.add_argument("--seeds", type=_int_list, default=[0, 1, 2],
                   help="comma list of seeds averaged per cell (default: 0,1,2)")
    p.add_argument("--preset", default="desk", choices=("full", "desk"),
                   help="layer widths (default: desk)")
    p.add_argument("--horizon", type=int, default=60, help="rollout length [steps] (default: 60)")
    p.add_argument("--stride", type=int, default=10, help="window spacing [samples] (default: 10)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default: 1)")
    p.add_argument("--allow-unstable", action="store_true",
                   help=f"permit unroll lengths above {UNSTABLE_UNROLL} steps")
    _add_settings(p, {k: v for k, v in TRAIN_SETTINGS.items() if k not in ("unroll", "seed")})
    _add_run_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-inference", help="single-prediction latency vs parameter count")
    p.add_argument("--archs", type=_str_list, default=list(mz.ARCHS),
                   help="comma list of encoders (default: mlp,lstm,gru,tcn)")
    p.add_argument("--history", type=int, default=20, help="history length [samples] (default: 20)")
    p.add_argument("--head", default="decoupled", choices=mz.HEADS,
                   help="predictor head (default: decoupled)")
    p.add_argument("--preset", default="full", choices=("full", "desk"),
                   help="layer widths (default: full)")
    p.add_argument("--repeats", type=int, default=50, help="timed predictions [count] (default: 50)")
    p.add_argument("--out", help="optional CSV output file")
    p.add_argument("--force", action="store_true", help="overwrite existing output")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (CLIError, ConfigError, FileNotFoundError, dp.IngestionError, dp.SplitError,
            ValueError) as exc:
        print(f"quaddyn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())

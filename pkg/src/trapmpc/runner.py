"""Benchmark harness: dataset and checkpoint files, trial execution,
multi-seed evaluation, and result aggregation."""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import invariant
from .baselines import ApfVoParams, make_controller
from .controller import NominalModel, TampcParams
from .gp import input_stats_from_dataset
from .mppi import MppiParams
from .worlds import (PlanarState, collect_random_dataset, goal_distance_field,
                     make_task, step)


# ---------------------------------------------------------------------------
# Dataset files


class ArrayDataset:
    """Dataset view backed by stacked arrays (as stored on disk)."""

    def __init__(self, X, U, DX, traj_id):
        self.X, self.U, self.DX, self.traj_id = X, U, DX, traj_id

    def arrays(self):
        return self.X, self.U, self.DX, self.traj_id

    def __len__(self):
        return len(self.X)


def save_dataset(dataset, path):
    X, U, DX, tid = dataset.arrays()
    np.savez_compressed(path, X=X, U=U, DX=DX, traj_id=tid)


def load_dataset(path) -> ArrayDataset:
    d = np.load(path)
    return ArrayDataset(d["X"], d["U"], d["DX"], d["traj_id"])


# ---------------------------------------------------------------------------
# Model training and checkpoints


def train_models(dataset, seed=0, epochs=3000, out_dir=None, fine_tune_model=True,
                 with_baseline=True, curve_path=None):
    """Train the invariant predictor (and optionally the direct baseline),
    calibrate the online error statistics, and write checkpoints.

    Returns (NominalModel, TransformSet, baseline net or None, TrainLog).
    """
    ts, log = invariant.train(dataset, epochs=epochs, seed=seed)
    if fine_tune_model:
        ts = invariant.fine_tune(ts, dataset, seed=seed)

    X, U, DX, _ = dataset.arrays()
    E = invariant.model_error_per_dim(ts.predict, X, U, DX)
    E = np.maximum(E, 1e-12)
    # threshold from genuinely held-out nominal rollouts
    held = collect_random_dataset(make_task("freespace"), n_traj=20, n_steps=50,
                                  seed=seed + 90001)
    Xh, Uh, DXh, _ = held.arrays()
    errs = (DXh - ts.predict(Xh, Uh)) / E
    scores = np.linalg.norm(errs, axis=1)
    eps = float(np.percentile(scores, 99.9))
    mean, scale = input_stats_from_dataset(dataset)

    baseline = invariant.train_baseline(dataset, epochs=epochs, seed=seed) if with_baseline else None

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        extra = {"E": E.tolist(), "eps_nominal": eps,
                 "gp_input_mean": mean.tolist(), "gp_input_scale": scale.tolist()}
        invariant.save_transforms_file(ts, out_dir / "transforms.json", extra=extra)
        if baseline is not None:
            from .nets import save_mlp_file
            save_mlp_file(baseline, out_dir / "baseline.json")
        if curve_path is None:
            curve_path = out_dir / "training_curve.csv"
        log.to_csv(curve_path)

    model = NominalModel(predict=invariant.nominal_manifold_predict(ts.predict),
                         error_per_dim=E, eps_nominal=eps,
                         gp_input_mean=mean, gp_input_scale=scale)
    return model, ts, baseline, log


def load_model(models_dir) -> NominalModel:
    ts, extra = invariant.load_transforms_file(Path(models_dir) / "transforms.json")
    return NominalModel(predict=invariant.nominal_manifold_predict(ts.predict),
                        error_per_dim=np.array(extra["E"]),
                        eps_nominal=float(extra["eps_nominal"]),
                        gp_input_mean=np.array(extra["gp_input_mean"]),
                        gp_input_scale=np.array(extra["gp_input_scale"]))


# ---------------------------------------------------------------------------
# Trials


@dataclass
class RunConfig:
    task: str
    controller: str
    seed: int = 0
    max_steps: int = 500
    success_threshold: float = 0.05
    resolution: float = 0.01
    tampc: dict = field(default_factory=dict)
    mppi: dict = field(default_factory=dict)
    apf: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    @classmethod
    def from_dict(cls, d) -> "RunConfig":
        allowed = {"task", "controller", "seed", "max_steps", "success_threshold",
                   "resolution", "tampc", "mppi", "apf"}
        unknown = set(d) - allowed
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrialResult:
    task: str
    controller: str
    seed: int
    min_distance: float
    success: bool
    steps_to_success: int | None
    mode_histogram: dict
    wall_clock: float


def run_trial(cfg: RunConfig, model: NominalModel, runlog_path=None):
    """Execute one trial; returns (TrialResult, per-step records)."""
    world = make_task(cfg.task)
    tampc_params = TampcParams(**cfg.tampc) if cfg.tampc else None
    mppi_params = MppiParams(**cfg.mppi) if cfg.mppi else None
    apf_params = ApfVoParams(**cfg.apf) if cfg.apf else None
    ctrl = make_controller(cfg.controller, world, model, seed=cfg.seed,
                           tampc_params=tampc_params, mppi_params=mppi_params,
                           apf_params=apf_params)
    field_ = goal_distance_field(world, cfg.resolution)
    s = world.start
    min_dist = field_.query(s.pos)
    steps_to_success = None
    sim_info = []
    t_start = time.perf_counter()
    for t in range(cfg.max_steps):
        u = ctrl.act(s)
        tr = step(world, s, u)
        s = tr.next_state
        d = field_.query(s.pos)
        sim_info.append({"dist": float(d), "contact": tr.contact,
                         "pos": s.pos.tolist()})
        if d < min_dist:
            min_dist = d
        if steps_to_success is None and d < cfg.success_threshold:
            steps_to_success = t + 1
    if hasattr(ctrl, "finalize"):
        ctrl.finalize(s)
    wall = time.perf_counter() - t_start

    records = []
    ctrl_log = getattr(ctrl, "log", [])
    for t in range(cfg.max_steps):
        rec = dict(ctrl_log[t]) if t < len(ctrl_log) else {"t": t}
        rec.update(sim_info[t])
        records.append(rec)
    hist = {}
    for rec in records:
        m = rec.get("mode", "?")
        hist[m] = hist.get(m, 0) + 1
    res = TrialResult(task=cfg.task, controller=cfg.controller, seed=cfg.seed,
                      min_distance=float(min_dist), success=bool(min_dist < cfg.success_threshold),
                      steps_to_success=steps_to_success, mode_histogram=hist,
                      wall_clock=wall)
    if runlog_path is not None:
        write_runlog(records, runlog_path, cfg)
    return res, records


def write_runlog(records, path, cfg: RunConfig = None):
    with open(path, "w") as f:
        if cfg is not None:
            header = {"task": cfg.task, "controller": cfg.controller,
                      "seed": cfg.seed, "max_steps": cfg.max_steps,
                      "success_threshold": cfg.success_threshold}
            f.write(json.dumps({"header": header}) + "\n")
        for rec in records:
            f.write(json.dumps(rec) + "\n")


def read_runlog(path):
    header, records = None, []
    with open(path) as f:
        for line in f:
            obj = json.loads(line)
            if "header" in obj:
                header = obj["header"]
            else:
                records.append(obj)
    return header, records


def _trial_worker(args):
    cfg_dict, models_dir = args
    model = load_model(models_dir)
    res, _ = run_trial(RunConfig.from_dict(cfg_dict), model)
    return res


def eval_sweep(cfg: RunConfig, seeds, model: NominalModel = None, models_dir=None,
               workers: int = 1):
    """Run the trial for every seed; each trial is internally deterministic."""
    results = []
    if workers > 1 and models_dir is not None:
        base = cfg.__dict__.copy()
        jobs = []
        for sd in seeds:
            d = dict(base)
            d["seed"] = int(sd)
            jobs.append((d, models_dir))
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_trial_worker, jobs))
    else:
        if model is None:
            model = load_model(models_dir)
        for sd in seeds:
            c = RunConfig.from_dict({**cfg.__dict__, "seed": int(sd)})
            res, _ = run_trial(c, model)
            results.append(res)
    return results


def aggregate(results):
    """Per (task, controller): success count and distance percentiles.

    Percentiles use linear interpolation.
    """
    groups = {}
    for r in results:
        groups.setdefault((r.task, r.controller), []).append(r)
    rows = []
    for (task, ctrl), rs in sorted(groups.items()):
        dists = np.array([r.min_distance for r in rs])
        rows.append({
            "task": task, "controller": ctrl, "n": len(rs),
            "successes": int(sum(r.success for r in rs)),
            "median": float(np.percentile(dists, 50)),
            "p20": float(np.percentile(dists, 20)),
            "p80": float(np.percentile(dists, 80)),
        })
    return rows


RESULT_FIELDS = ["task", "controller", "seed", "min_distance", "success",
                 "steps_to_success", "wall_clock"]


def write_results_csv(results, path, summary=True):
    with open(path, "w") as f:
        f.write("# percentiles: linear interpolation\n")
        f.write(",".join(RESULT_FIELDS) + "\n")
        for r in results:
            f.write(f"{r.task},{r.controller},{r.seed},{r.min_distance:.6g},"
                    f"{int(r.success)},{r.steps_to_success if r.steps_to_success is not None else ''},"
                    f"{r.wall_clock:.3f}\n")
        if summary and results:
            for row in aggregate(results):
                f.write(f"# summary,{row['task']},{row['controller']},"
                        f"successes={row['successes']}/{row['n']},"
                        f"median={row['median']:.6g},p20={row['p20']:.6g},"
                        f"p80={row['p80']:.6g}\n")


def read_results_csv(path):
    rows = []
    with open(path) as f:
        header = None
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                continue
            vals = line.split(",")
            rows.append(dict(zip(header, vals)))
    return rows

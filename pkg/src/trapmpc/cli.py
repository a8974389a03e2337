"""Command-line interface: collect / train / run / eval / plot."""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import runner
from .baselines import CONTROLLER_KEYS
from .runner import RunConfig
from .worlds import TASK_KEYS, collect_random_dataset, make_task


def _out_dir(path) -> Path:
    base = os.environ.get("TRAPMPC_OUT")
    p = Path(path)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_config(config, task, ctrl, seed, max_steps, threshold) -> RunConfig:
    d = {}
    if config:
        try:
            with open(config) as f:
                d = yaml.safe_load(f) or {}
        except FileNotFoundError:
            raise click.ClickException(f"config file not found: {config}")
        except yaml.YAMLError as e:
            raise click.ClickException(f"malformed config: {e}")
    if task:
        d["task"] = task
    if ctrl:
        d["controller"] = ctrl
    if seed is not None:
        d["seed"] = seed
    if max_steps is not None:
        d["max_steps"] = max_steps
    if threshold is not None:
        d["success_threshold"] = threshold
    if d.get("task") not in TASK_KEYS:
        raise click.ClickException(f"unknown task: {d.get('task')} (choose from {TASK_KEYS})")
    if d.get("controller") not in CONTROLLER_KEYS:
        raise click.ClickException(
            f"unknown controller: {d.get('controller')} (choose from {CONTROLLER_KEYS})")
    try:
        return RunConfig.from_dict(d)
    except (KeyError, TypeError, ValueError) as e:
        raise click.ClickException(f"malformed config: {e}")


@click.group()
def main():
    """Trap-aware MPC benchmark on a planar contact world."""


@main.command()
@click.option("--task", default="freespace", show_default=True)
@click.option("--n-traj", default=200, show_default=True)
@click.option("--n-steps", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="dataset.npz", show_default=True)
def collect(task, n_traj, n_steps, seed, out):
    """Collect a random-action dataset in the obstacle-free regime."""
    if task not in TASK_KEYS:
        raise click.ClickException(f"unknown task: {task}")
    world = make_task(task)
    if world.walls:
        raise click.ClickException("dataset collection requires an obstacle-free task")
    ds = collect_random_dataset(world, n_traj, n_steps, seed)
    path = _out_dir(out)
    runner.save_dataset(ds, path)
    click.echo(f"wrote {len(ds)} transitions to {path}")


@main.command()
@click.option("--dataset", required=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--epochs", default=3000, show_default=True)
@click.option("--no-baseline", is_flag=True, default=False)
@click.option("--out-dir", default="models", show_default=True)
def train(dataset, seed, epochs, no_baseline, out_dir):
    """Train the invariant dynamics model (and the direct baseline)."""
    try:
        ds = runner.load_dataset(dataset)
    except FileNotFoundError:
        raise click.ClickException(f"dataset file not found: {dataset}")
    out = _out_dir(Path(out_dir) / "x").parent
    model, _, _, _ = runner.train_models(ds, seed=seed, epochs=epochs,
                                         out_dir=out, with_baseline=not no_baseline)
    click.echo(f"checkpoints in {out} (eps_nominal={model.eps_nominal:.3g})")


@main.command()
@click.option("--task", default=None)
@click.option("--controller", "ctrl", default=None)
@click.option("--seed", default=None, type=int)
@click.option("--max-steps", default=None, type=int)
@click.option("--threshold", default=None, type=float)
@click.option("--config", default=None, help="YAML run config")
@click.option("--models", "models_dir", default="models", show_default=True)
@click.option("--out", default="runlog.jsonl", show_default=True)
def run(task, ctrl, seed, max_steps, threshold, config, models_dir, out):
    """Run a single trial and write its JSONL log."""
    cfg = _load_config(config, task, ctrl, seed if seed is not None else 0,
                       max_steps, threshold)
    try:
        model = runner.load_model(models_dir)
    except FileNotFoundError:
        raise click.ClickException(f"model checkpoints not found in: {models_dir}")
    res, _ = runner.run_trial(cfg, model, runlog_path=_out_dir(out))
    click.echo(f"task={res.task} controller={res.controller} seed={res.seed} "
               f"min_distance={res.min_distance:.4f} success={res.success}")


def _parse_seeds(spec: str):
    if ".." in spec:
        a, b = spec.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(s) for s in spec.split(",")]


@main.command("eval")
@click.option("--task", default=None)
@click.option("--controller", "ctrl", default=None)
@click.option("--seeds", default="0..9", show_default=True, help="e.g. 0..9 or 0,3,7")
@click.option("--max-steps", default=None, type=int)
@click.option("--threshold", default=None, type=float)
@click.option("--config", default=None)
@click.option("--models", "models_dir", default="models", show_default=True)
@click.option("--workers", default=1, show_default=True)
@click.option("--out", default="results.csv", show_default=True)
def eval_cmd(task, ctrl, seeds, max_steps, threshold, config, models_dir, workers, out):
    """Sweep seeds for one (task, controller) and write a results CSV."""
    cfg = _load_config(config, task, ctrl, 0, max_steps, threshold)
    try:
        seed_list = _parse_seeds(seeds)
    except ValueError:
        raise click.ClickException(f"bad seed spec: {seeds}")
    if not Path(models_dir, "transforms.json").exists():
        raise click.ClickException(f"model checkpoints not found in: {models_dir}")
    results = runner.eval_sweep(cfg, seed_list, models_dir=models_dir, workers=workers)
    path = _out_dir(out)
    runner.write_results_csv(results, path)
    agg = runner.aggregate(results)[0]
    click.echo(f"{agg['task']} {agg['controller']}: {agg['successes']}/{agg['n']} successes, "
               f"median min distance {agg['median']:.4f} -> {path}")


@main.command()
@click.option("--results", "results_paths", multiple=True, required=True)
@click.option("--threshold", default=0.05, show_default=True)
@click.option("--out", default="plot.svg", show_default=True)
def plot(results_paths, threshold, out):
    """Minimum-distance chart (median + 20-80th percentile) across controllers."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = []
    for p in results_paths:
        try:
            rows.extend(runner.read_results_csv(p))
        except FileNotFoundError:
            raise click.ClickException(f"results file not found: {p}")
    if not rows:
        raise click.ClickException("no result rows found")
    groups = {}
    for r in rows:
        key = (r["task"], r["controller"])
        groups.setdefault(key, []).append(float(r["min_distance"]))
    fig, ax = plt.subplots(figsize=(1.8 + 1.2 * len(groups), 4))
    labels, meds, lo, hi = [], [], [], []
    for (task, ctrl), ds in sorted(groups.items()):
        ds = np.array(ds)
        labels.append(f"{ctrl}\n{task}")
        meds.append(np.percentile(ds, 50))
        lo.append(np.percentile(ds, 50) - np.percentile(ds, 20))
        hi.append(np.percentile(ds, 80) - np.percentile(ds, 50))
    xs = np.arange(len(labels))
    ax.errorbar(xs, meds, yerr=[lo, hi], fmt="o", capsize=4)
    ax.axhline(threshold, color="red", linestyle=":", label="success threshold")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("min distance to goal (wall-aware)")
    ax.legend()
    fig.tight_layout()
    path = _out_dir(out)
    fig.savefig(path)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    sys.exit(main())

"""netforecast Command Line Interface."""

import dataclasses
import importlib.metadata
import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional

import typer

from .config import RunConfig, derive_seed, load_config, parse_override

if TYPE_CHECKING:
    from .data import TrafficSeries
    from .model import Checkpoint

app = typer.Typer(help="Graph-convolutional recurrent forecasting of network traffic.")

EXIT_USAGE = 2
EXIT_NUMERIC = 3

logger = logging.getLogger(__name__)


def _get_version() -> str:
    """Get the package version from metadata."""
    try:
        return importlib.metadata.version("netforecast")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def version_callback(value: bool):
    """Handle --version flag."""
    if value:
        typer.echo(f"netforecast version: {_get_version()}")
        raise typer.Exit()
    return value


@app.callback()
def main(
    version: bool = typer.Option(
        False, "--version", help="Show the version and exit.", callback=version_callback, is_eager=True
    ),
    verbose: int = typer.Option(0, "--verbose", "-v", count=True, help="-v for info, -vv for debug logging."),
):
    """netforecast CLI main entrypoint."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@app.command()
def version():
    """Show the version and exit."""
    typer.echo(f"netforecast version: {_get_version()}")


def _fail(message: str, code: int) -> typer.Exit:
    typer.secho(f"Error: {message}", fg=typer.colors.RED, err=True)
    return typer.Exit(code=code)


def _exit_for(e: Exception) -> typer.Exit:
    """Map an exception onto the stable exit-code contract."""
    from .train import TrainingDivergedError

    if isinstance(e, (TrainingDivergedError, RuntimeError, FloatingPointError)):
        return _fail(str(e), EXIT_NUMERIC)
    if isinstance(e, (ValueError, OSError, KeyError)):
        return _fail(str(e), EXIT_USAGE)
    raise e


def _resolve_config(config_path: Optional[Path], flags: Dict[str, object], sets: Optional[List[str]]) -> RunConfig:
    overrides: Dict[str, object] = {k: v for k, v in flags.items() if v is not None}
    overrides.update(parse_override(s) for s in sets or [])
    return load_config(config_path, overrides)


@app.command("gen-synth")
def gen_synth(
    topology: Path = typer.Option(..., "--topology", help="Topology JSON."),
    steps: int = typer.Option(2016, "--steps", help="Number of timesteps (5-minute cadence by default)."),
    seed: int = typer.Option(0, "--seed", help="Root seed."),
    coupling: float = typer.Option(0.3, "--coupling", help="Pull toward the neighbor average, in [0, 1]."),
    period: int = typer.Option(288, "--period", help="Daily period in steps."),
    amplitude: float = typer.Option(0.4, "--amplitude", help="Relative amplitude of the daily cycle."),
    noise: float = typer.Option(0.05, "--noise", help="Relative Gaussian noise level."),
    cadence: int = typer.Option(300, "--cadence", help="Seconds between timestamps."),
    out: Path = typer.Option(..., "--out", help="Output CSV."),
    as_json: bool = typer.Option(False, "--json", help="Print a JSON summary."),
):
    """Generate synthetic spatiotemporally coupled traffic on a topology."""
    from .data import SyntheticOptions, generate_synthetic
    from .graph import Topology

    if steps < 1:
        raise _fail(f"--steps must be >= 1, got {steps}", EXIT_USAGE)
    try:
        topo = Topology.from_json(topology)
        options = SyntheticOptions(coupling=coupling, period=period, amplitude=amplitude, noise=noise, cadence=cadence)
        series = generate_synthetic(topo, steps, derive_seed(seed, "synthetic"), options)
        recipe = {
            "steps": steps,
            "topology": str(topology),
            "topology_sha1": topo.fingerprint(),
            "options": dataclasses.asdict(options),
        }
        series.to_csv(out, header_comment=f"gen-synth seed={seed} {json.dumps(recipe, sort_keys=True)}")
    except Exception as e:
        raise _exit_for(e)
    summary = {"nodes": series.n_nodes, "steps": series.n_steps, "seed": seed, "out": str(out)}
    if as_json:
        typer.echo(json.dumps(summary))
    else:
        typer.echo(f"Wrote {series.n_steps} steps x {series.n_nodes} nodes (seed {seed}) to {out}")


@app.command()
def train(
    data: Path = typer.Option(..., "--data", help="Traffic CSV."),
    topology: Path = typer.Option(..., "--topology", help="Topology JSON."),
    out: Path = typer.Option(..., "--out", help="Output directory for checkpoint, history and metrics."),
    config: Optional[Path] = typer.Option(None, "--config", help="INI config file."),
    adjacency: Optional[str] = typer.Option(
        None, "--adjacency", help="distance|correlation|knn|adaptive|learnable|explicit"
    ),
    temporal: Optional[str] = typer.Option(None, "--temporal", help="gru|lstm"),
    attention: Optional[bool] = typer.Option(None, "--attention/--no-attention", help="Attention-weighted GCN."),
    window: Optional[int] = typer.Option(None, "--window", help="Input window length."),
    horizon: Optional[int] = typer.Option(None, "--horizon", help="Forecast horizon."),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Maximum epochs."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Root seed."),
    sets: Optional[List[str]] = typer.Option(None, "--set", help="Override as section.key=value (repeatable)."),
    as_json: bool = typer.Option(False, "--json", help="Print the test metrics as JSON."),
):
    """Train a model and write checkpoint.json, history.csv and metrics.json to --out."""
    from .experiment import Experiment, summarize

    flags: Dict[str, object] = {
        "graph.adjacency": adjacency,
        "model.temporal": temporal,
        "model.attention": attention,
        "data.window": window,
        "data.horizon": horizon,
        "train.epochs": epochs,
        "seed": seed,
    }
    try:
        run_config = _resolve_config(config, flags, sets)
        experiment = Experiment.from_files(run_config, data, topology)
        result = experiment.run(out)
    except Exception as e:
        raise _exit_for(e)
    if as_json:
        typer.echo(result.report.to_json())
    else:
        typer.echo(summarize({"model": result.report, "persistence": result.baseline}))
        typer.echo(f"Best epoch {result.history.best_epoch} of {len(result.history)}; artifacts in {out}")


@app.command("eval")
def eval_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint JSON from `train`."),
    data: Path = typer.Option(..., "--data", help="Traffic CSV."),
    topology: Optional[Path] = typer.Option(None, "--topology", help="Topology JSON (node names are checked)."),
    split: str = typer.Option("test", "--split", help="train|val|test"),
    as_json: bool = typer.Option(True, "--json/--table", help="JSON (default) or a table."),
):
    """Evaluate a checkpoint on one split and print its metrics."""
    from .experiment import Experiment, summarize
    from .graph import Topology
    from .model import Checkpoint

    try:
        ckpt = Checkpoint.load(checkpoint)
        topo = Topology.from_json(topology).reorder(ckpt.node_names) if topology is not None else None
        series = _load_for_checkpoint(data, ckpt)
        experiment = Experiment.from_checkpoint(ckpt, series, topo)
        report = experiment.evaluate(ckpt.params, split)
    except Exception as e:
        raise _exit_for(e)
    if as_json:
        typer.echo(report.to_json())
    else:
        typer.echo(summarize({"model": report}))


def _load_for_checkpoint(data: Path, ckpt: "Checkpoint") -> "TrafficSeries":
    """Load ``data`` with columns matched to the checkpoint's node order."""
    from .data import load_traffic_csv

    series = load_traffic_csv(data, ckpt.node_names)
    if series.n_nodes != len(ckpt.node_names):
        raise ValueError(f"Checkpoint has {len(ckpt.node_names)} nodes but the data has {series.n_nodes}")
    return series


@app.command()
def predict(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint JSON from `train`."),
    data: Path = typer.Option(..., "--data", help="Traffic CSV."),
    out: Path = typer.Option(..., "--out", help="Output forecast CSV."),
    split: str = typer.Option("test", "--split", help="train|val|test"),
    as_json: bool = typer.Option(False, "--json", help="Print a JSON summary."),
):
    """Write per-node forecasts for every window of a split."""
    from .experiment import Experiment, write_forecasts
    from .model import Checkpoint

    try:
        ckpt = Checkpoint.load(checkpoint)
        series = _load_for_checkpoint(data, ckpt)
        experiment = Experiment.from_checkpoint(ckpt, series)
        forecasts, stamps = experiment.predict(ckpt.params, split)
        rows = write_forecasts(out, stamps, forecasts, ckpt.node_names, ckpt.config)
    except Exception as e:
        raise _exit_for(e)
    if as_json:
        typer.echo(json.dumps({"rows": rows, "split": split, "out": str(out)}))
    else:
        typer.echo(f"Wrote {rows} {split} forecasts to {out}")


@app.command()
def ablate(
    data: Path = typer.Option(..., "--data", help="Traffic CSV."),
    topology: Path = typer.Option(..., "--topology", help="Topology JSON."),
    axes: str = typer.Option(
        "adjacency,temporal,attention",
        "--axes",
        help="Comma-separated axes (adjacency, temporal, attention, gcn_layers).",
    ),
    out: Path = typer.Option(..., "--out", help="Output grid CSV."),
    config: Optional[Path] = typer.Option(None, "--config", help="INI config file."),
    epochs: Optional[int] = typer.Option(None, "--epochs", help="Maximum epochs per cell."),
    seed: Optional[int] = typer.Option(None, "--seed", help="Root seed shared by every cell."),
    sets: Optional[List[str]] = typer.Option(None, "--set", help="Override as section.key=value (repeatable)."),
    as_json: bool = typer.Option(False, "--json", help="Print the best cell as JSON."),
):
    """Train and evaluate every combination of the ablation axes."""
    from .data import load_traffic_csv
    from .evaluation import parse_axes, run_ablation
    from .graph import Topology

    try:
        parsed = parse_axes(axes)
        run_config = _resolve_config(config, {"train.epochs": epochs, "seed": seed}, sets)
        topo = Topology.from_json(topology)
        series = load_traffic_csv(data, topo)
        grid = run_ablation(run_config, parsed, series, topo, progress=run_config.train.progress)
        grid.to_csv(out)
    except Exception as e:
        raise _exit_for(e)
    best = grid.best()
    if as_json:
        summary = {"cells": len(grid), "best": best.delta if best else None, "mae": best.mae if best else None}
        typer.echo(json.dumps(summary))
    else:
        for cell in grid.sorted_cells():
            typer.echo(f"{cell.delta:<50} mae={cell.mae:.6g} {cell.status}")
        if best is not None:
            typer.echo(f"Best: {best.delta} (mae={best.mae:.6g})")


if __name__ == "__main__":
    app()

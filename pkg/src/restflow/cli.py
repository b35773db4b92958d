"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort,
3 gradient-check failure.
"""

import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import flow, metrics
from .data import SynthSpec, collect_task_series, gen_dataset, load_synth_spec, read_dataset, write_dataset
from .diffcore import NumericalError
from .gradcheck import run_gradcheck
from .io import (
    ParseError,
    RunConfig,
    ValidationError,
    load_config,
    load_event_dir,
    load_timeseries,
    save_timeseries,
    split_subjects,
)


class ConfigFailure(click.ClickException):
    exit_code = 1


class NumericalFailure(click.ClickException):
    exit_code = 2


class GradcheckFailure(click.ClickException):
    exit_code = 3


def _config(path):
    try:
        return load_config(path) if path else RunConfig()
    except (ParseError, ValidationError) as exc:
        raise ConfigFailure(str(exc)) from None


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def cli(verbose):
    """Event-conditioned flow matching for rest-to-task ROI time series."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command("synth-data")
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False), help="Synthetic data spec (key = value).")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
def synth_data(spec_path, out, seed):
    """Write a synthetic paired rest/task dataset."""
    try:
        spec = load_synth_spec(spec_path) if spec_path else SynthSpec()
        pairs = gen_dataset(spec, seed)
    except (ParseError, ValidationError) as exc:
        raise ConfigFailure(str(exc)) from None
    try:
        write_dataset(pairs, out)
    except OSError as exc:
        raise ConfigFailure(f"cannot write {out}: {exc}") from None
    click.echo(f"wrote {len(pairs)} subjects to {out}")


@cli.command()
@click.option("--data", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Checkpoint directory.")
@click.option("--epochs", type=int, default=None, help="Override the configured epoch count.")
def train(data, config_path, out, epochs):
    """Train on the training split of a dataset directory and write a checkpoint."""
    cfg = _config(config_path)
    try:
        if epochs is not None:
            cfg = cfg.replace(epochs=epochs)
        pairs = read_dataset(data)
        ids = [p.subject_id for p in pairs]
        train_ids, val_ids, test_ids = split_subjects(ids, cfg.fractions, cfg.seed)
        chosen = set(train_ids)
        train_set = [p for p in pairs if p.subject_id in chosen]
        if not train_set:
            raise ValidationError("training split is empty")
        start = time.perf_counter()
        model, history = flow.train(train_set, cfg)
    except (ParseError, ValidationError, ValueError) as exc:
        raise ConfigFailure(str(exc)) from None
    except NumericalError as exc:
        raise NumericalFailure(f"training aborted: {exc}") from None
    flow.save_checkpoint(model, history, out)
    split_text = "".join(f"{name} {sid}\n" for name, group in
                         (("train", train_ids), ("val", val_ids), ("test", test_ids)) for sid in group)
    (Path(out) / "split.txt").write_text(split_text)
    final = history[-1]["total"] if history else float("nan")
    click.echo(f"trained on {len(train_set)} subjects for {cfg.epochs} epochs "
               f"in {time.perf_counter() - start:.1f}s; final total loss {final:.6g}")


def _split_ids(ckpt, split):
    path = Path(ckpt) / "split.txt"
    if not path.exists():
        raise ConfigFailure(f"{path} not found; cannot select split {split!r}")
    return {sid for name, sid in (ln.split() for ln in path.read_text().splitlines() if ln.strip()) if name == split}


@cli.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--rest", type=click.Path(exists=True, dir_okay=False), help="Rest series file.")
@click.option("--events", type=click.Path(file_okay=False), help="Directory of <condition>.ev files.")
@click.option("--data", type=click.Path(exists=True, file_okay=False), help="Generate for every subject of a dataset.")
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="all", show_default=True)
@click.option("--steps", type=int, default=None, help="Euler steps (default: checkpoint config).")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(), help="Output file (or directory with --data).")
def generate(ckpt, rest, events, data, split, steps, seed, out):
    """Synthesize task series by integrating the learned ODE."""
    if (rest is None) == (data is None):
        raise ConfigFailure("give exactly one of --rest or --data")
    if steps is not None and steps < 1:
        raise ConfigFailure(f"--steps must be >= 1, got {steps}")
    model, _ = flow.load_checkpoint(ckpt)
    rng = np.random.default_rng(seed)
    try:
        if rest is not None:
            x_rest = load_timeseries(rest)
            schedule = load_event_dir(events, model.tr, model.vocab) if events else None
            save_timeseries(flow.sample(x_rest, schedule, model, steps, rng), out)
            click.echo(f"wrote {out}")
            return
        pairs = read_dataset(data)
        if split != "all":
            keep = _split_ids(ckpt, split)
            pairs = [p for p in pairs if p.subject_id in keep]
        Path(out).mkdir(parents=True, exist_ok=True)
        for p in pairs:
            sched = load_event_dir(Path(data) / p.subject_id / "events", model.tr, model.vocab)
            save_timeseries(flow.sample(p.rest, sched, model, steps, rng), Path(out) / f"{p.subject_id}.ts")
        click.echo(f"wrote {len(pairs)} series to {out}")
    except (ParseError, ValidationError, ValueError) as exc:
        raise ConfigFailure(str(exc)) from None
    except NumericalError as exc:
        raise NumericalFailure(f"generation aborted: {exc}") from None


def evaluate_dirs(real, gen, cfg, task="task"):
    """Pair task series by subject id and score them; returns (report, unpaired ids)."""
    real_map, gen_map = collect_task_series(real), collect_task_series(gen)
    common = sorted(set(real_map) & set(gen_map))
    unpaired = sorted(set(real_map) ^ set(gen_map))
    if not common:
        raise ValidationError(f"no subjects in common between {real} and {gen}")
    tr = real_map[common[0]].tr
    T = real_map[common[0]].n_timepoints
    report = metrics.evaluate([real_map[s].data for s in common], [gen_map[s].data for s in common],
                              tr, cfg.band, min(cfg.welch_seg_len, T), task=task)
    return report, unpaired


@cli.command()
@click.option("--real", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gen", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--task", default="task", show_default=True, help="Label for the report row.")
def evaluate(real, gen, config_path, out, task):
    """Score generated task series against real ones (CSV report)."""
    cfg = _config(config_path)
    try:
        report, unpaired = evaluate_dirs(real, gen, cfg, task)
    except (ParseError, ValidationError) as exc:
        raise ConfigFailure(str(exc)) from None
    if unpaired:
        click.echo(f"warning: skipping {len(unpaired)} unpaired subject(s): {', '.join(unpaired)}", err=True)
    for flag in report.flags:
        click.echo(f"warning: {flag}", err=True)
    Path(out).write_text(metrics.format_report_csv([report]))
    click.echo(f"n={report.n_subjects} mae={report.mae:.4f} psd={report.psd_disc:.4f} "
               f"fc_sim={report.fc_sim:.4f} p_at_5={report.p_at_5:.4f} cfid={report.cfid:.4f}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--tolerance", default=1e-4, show_default=True, type=float)
def gradcheck(config_path, seed, tolerance):
    """Finite-difference check of all model and loss gradients on a micro model."""
    cfg = _config(config_path)
    start = time.perf_counter()
    report = run_gradcheck(cfg, seed=seed, tolerance=tolerance)
    for name, err in report.by_param().items():
        click.echo(f"{name:32s} {err:.3e}")
    click.echo(f"max relative error {report.max_error:.3e} ({time.perf_counter() - start:.1f}s)")
    if not report.passed:
        name, comp = report.worst
        raise GradcheckFailure(f"gradient check failed for {name} ({comp} loss): "
                               f"{report.max_error:.3e} > {tolerance:.1e}")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="restflow", standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        code = exc.exit_code if isinstance(exc, (ConfigFailure, NumericalFailure, GradcheckFailure)) else 1
        sys.exit(code)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.exceptions.Exit as exc:
        sys.exit(exc.exit_code)
    sys.exit(0)


if __name__ == "__main__":
    main()

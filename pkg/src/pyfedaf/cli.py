"""Module that contains the command line app."""

from __future__ import annotations

import attr
import click
import functools
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import _cfg
from ._cfg import ConfigurationError
from ._logging import configure_logging
from ._utils import DivergenceError, IDXFormatError, ParameterError, parse_csv_values
from .data import partition_iid
from .evaluation import (
    OVERLAP_COLUMNS,
    SWEEP_PARAMETERS,
    SweepSpec,
    load_datasets,
    prepare_scenario,
    run_arm,
    run_overlap,
    summarize_records,
    sweep,
)
from .federation import run_federated
from .inputs import ARMS, LABEL_KIND_NAMES, ExperimentConfig, FakeLabelKind, dump_config, parse_config
from .nn import accuracy
from .outputs import (
    collect_csv_paths,
    read_csv_rows,
    write_metrics_csv,
    write_metrics_json,
    write_round_metrics_csv,
    write_rows_csv,
)

logger = logging.getLogger("pyfedaf")

_LIBRARY_ERRORS = (
    ParameterError,
    ConfigurationError,
    DivergenceError,
    IDXFormatError,
    FileNotFoundError,
    FileExistsError,
)


class _Main(click.Group):
    def parse_args(self, ctx, args):
        if not args:
            click.echo(ctx.get_help())
            ctx.exit(2)
        return super().parse_args(ctx, args)


def _handle_errors(fnc):
    @functools.wraps(fnc)
    def wrapper(*args, **kwargs):
        try:
            return fnc(*args, **kwargs)
        except _LIBRARY_ERRORS as e:
            raise click.ClickException(f"{type(e).__name__}: {e}")

    return wrapper


@click.group(cls=_Main)
@click.option("-v", "--verbose", count=True, help="Increase verbosity (-v INFO, -vv DEBUG).")
def main(verbose):
    """Simulate federated training and active-forgetting unlearning."""
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = _cfg.config["log_level"]
    configure_logging(level)


def _config_option(fnc):
    return click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False),
        required=True,
        help="Path to the YAML experiment config.",
    )(fnc)


def _out_option(fnc):
    return click.option(
        "--out",
        type=click.Path(file_okay=False),
        default=None,
        help=(
            "Directory to write results to. Defaults to the config's output_dir, then the "
            f"user config's 'direc' (which ${_cfg.OUTPUT_DIR_ENVVAR} overrides)."
        ),
    )(fnc)


def _trials_option(fnc):
    return click.option(
        "--trials", type=click.IntRange(min=1), default=None, help="Number of trials (default: from config)."
    )(fnc)


def _jobs_option(fnc):
    return click.option(
        "--jobs",
        type=click.IntRange(min=1),
        default=None,
        help="Number of trials to run in parallel processes (default: user config 'jobs').",
    )(fnc)


def _classes_option(fnc):
    return click.option(
        "--classes",
        default=None,
        help="Comma-separated target classes, or 'all' (default: the config's target class).",
    )(fnc)


def _resolve_out(out, cfg: ExperimentConfig) -> Path:
    direc = Path(out) if out else (cfg.output_dir or Path(_cfg.config["direc"]))
    direc = direc.expanduser()
    direc.mkdir(parents=True, exist_ok=True)
    return direc


def _resolve_classes(classes: str | None, cfg: ExperimentConfig) -> list[int]:
    if classes is None:
        return [cfg.request.target_class]
    if classes.strip().lower() == "all":
        return list(range(cfg.data.class_count))
    values = parse_csv_values(classes)
    out = [int(v) for v in values]
    if any(v != int(v) for v in values) or any(not 0 <= c < cfg.data.class_count for c in out):
        raise ParameterError(f"Invalid class list '{classes}'.")
    return out


def _jobs(jobs) -> int:
    return int(jobs if jobs is not None else _cfg.config["jobs"])


def _fan_out(fnc, items, jobs: int) -> list:
    """Map ``fnc`` over ``items``, in worker processes if ``jobs > 1``."""
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
            return list(pool.map(fnc, items))
    return [fnc(item) for item in items]


def _unlearn_trial(trial, cfg, arms, classes):
    records = []
    for c in classes:
        scenario = prepare_scenario(cfg, trial, target_class=c)
        records.extend(run_arm(scenario, arm) for arm in arms)
    return records


def _overlap_trial(trial, cfg, kinds, classes):
    return run_overlap(cfg, kinds, classes, trial=trial)


def _sweep_trial(trial, cfg, sweep_spec):
    single = attr.evolve(sweep_spec, trials=1)
    return sweep(cfg, single, scenario=lambda _: prepare_scenario(cfg, trial))


def _write_outputs(direc: Path, name: str, records, cfg: ExperimentConfig):
    csv_path = write_metrics_csv(records, direc / f"{name}.csv")
    json_path = write_metrics_json(records, direc / f"{name}.json", config=cfg.to_dict())
    dump_config(cfg, direc / "config.yml")
    click.echo(f"Wrote {len(records)} records to {csv_path} and {json_path}")


@main.command()
@_config_option
@click.option("--trial", type=click.IntRange(min=0), default=0, help="Trial index to seed from.")
@_jobs_option
@_out_option
@_handle_errors
def train(config_path, trial, jobs, out):
    """Run FedAvg only, saving the global state and per-round client metrics."""
    cfg = parse_config(config_path)
    direc = _resolve_out(out, cfg)

    train_data, test_data = load_datasets(cfg.data, cfg.seed)
    fed = cfg.federation_for_trial(trial)
    partition = partition_iid(train_data, fed.client_count, cfg.trial_seed(trial))

    rounds = []
    state = run_federated(
        fed, cfg.model_spec, partition, train_data, callback=rounds.append, jobs=_jobs(jobs)
    )

    write_round_metrics_csv(rounds, direc / f"rounds_trial{trial}.csv")
    state.save(direc / f"global_state_trial{trial}.h5", clobber=True)
    dump_config(cfg, direc / "config.yml")

    acc = accuracy(state.global_params, cfg.model_spec, test_data.as_batch())
    click.echo(f"Trained {fed.rounds} rounds with {fed.client_count} clients: test accuracy {acc:.4f}")


@main.command()
@_config_option
@click.option(
    "--arm",
    "arms",
    type=click.Choice(ARMS),
    multiple=True,
    default=("fedaf",),
    help="Unlearning method(s) to run; repeat for several.",
)
@click.option(
    "--label-kind",
    type=click.Choice(list(LABEL_KIND_NAMES.values())),
    default=None,
    help="Fake-label kind (default: from config).",
)
@_classes_option
@_trials_option
@_jobs_option
@_out_option
@_handle_errors
def unlearn(config_path, arms, label_kind, classes, trials, jobs, out):
    """Train, poison, unlearn and measure: one CSV row per (trial, class, arm)."""
    cfg = parse_config(config_path)
    if label_kind is not None:
        cfg = attr.evolve(cfg, label_kind=label_kind)
    if trials is not None:
        cfg = attr.evolve(cfg, trials=trials)
    direc = _resolve_out(out, cfg)
    class_list = _resolve_classes(classes, cfg)

    work = functools.partial(_unlearn_trial, cfg=cfg, arms=arms, classes=class_list)
    results = _fan_out(work, list(range(cfg.trials)), _jobs(jobs))
    _write_outputs(direc, "unlearn", [r for rs in results for r in rs], cfg)


@main.command()
@_config_option
@click.option(
    "--label-kind",
    "kinds",
    type=click.Choice(list(LABEL_KIND_NAMES.values())),
    multiple=True,
    default=None,
    help="Fake-label kind(s) to validate (default: all four).",
)
@click.option("--classes", default="all", help="Comma-separated classes, or 'all'.")
@_trials_option
@_jobs_option
@_out_option
@_handle_errors
def overlap(config_path, kinds, classes, trials, jobs, out):
    """Train from scratch on remaining data plus memories, for each class and kind."""
    cfg = parse_config(config_path)
    if trials is not None:
        cfg = attr.evolve(cfg, trials=trials)
    direc = _resolve_out(out, cfg)
    kinds = [FakeLabelKind.from_name(k) for k in (kinds or LABEL_KIND_NAMES.values())]
    class_list = _resolve_classes(classes, cfg)

    work = functools.partial(_overlap_trial, cfg=cfg, kinds=kinds, classes=class_list)
    rows = [r for rs in _fan_out(work, list(range(cfg.trials)), _jobs(jobs)) for r in rs]

    write_rows_csv(rows, OVERLAP_COLUMNS, direc / "overlap.csv")
    dump_config(cfg, direc / "config.yml")
    click.echo(f"Wrote {len(rows)} rows to {direc / 'overlap.csv'}")


@main.command("sweep")
@_config_option
@click.option(
    "--param",
    type=click.Choice(list(SWEEP_PARAMETERS)),
    required=True,
    help="Unlearning hyper-parameter to sweep.",
)
@click.option("--values", required=True, help="Comma-separated values, e.g. 0.1,10.")
@_trials_option
@_jobs_option
@_out_option
@_handle_errors
def sweep_cmd(config_path, param, values, trials, jobs, out):
    """Repeat FedAF unlearning over a grid of one hyper-parameter."""
    cfg = parse_config(config_path)
    if trials is not None:
        cfg = attr.evolve(cfg, trials=trials)
    direc = _resolve_out(out, cfg)
    try:
        spec = SweepSpec(param, parse_csv_values(values), trials=cfg.trials)
    except ValueError as e:
        raise ParameterError(str(e))

    work = functools.partial(_sweep_trial, cfg=cfg, sweep_spec=spec)
    results = _fan_out(work, list(range(cfg.trials)), _jobs(jobs))
    _write_outputs(direc, "sweep", [r for rs in results for r in rs], cfg)


@main.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--by", default="arm,class_id", help="Comma-separated columns to group by.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Also write the table as CSV.")
@_handle_errors
def report(paths, by, out):
    """Aggregate result CSVs into mean +- std per group."""
    rows = []
    for pth in collect_csv_paths(paths):
        rows.extend(read_csv_rows(pth))
    if not rows:
        raise ParameterError("No result rows found.")

    keys = [k.strip() for k in by.split(",") if k.strip()]
    summary = summarize_records(rows, by=keys)

    metrics = [k[: -len("_mean")] for k in summary[0] if k.endswith("_mean")]
    header = [*keys, "n", *metrics]
    table = [header]
    for s in summary:
        table.append(
            [str(s[k]) for k in keys]
            + [str(s["n"])]
            + [f"{s[m + '_mean']:.4f} +- {s[m + '_std']:.4f}" for m in metrics]
        )
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    for line in table:
        click.echo("  ".join(cell.ljust(w) for cell, w in zip(line, widths)))

    if out:
        write_rows_csv(summary, list(summary[0]), out)

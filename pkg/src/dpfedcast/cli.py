"""Command line: ``train``, ``budget``, ``synth``, ``diagnose``, ``make-benchmark``."""

from __future__ import annotations

import csv
import logging
import sys
from datetime import date

import click

from dpfedcast import accountant
from dpfedcast.benchmark import make_benchmark
from dpfedcast.data import (
    CaseDataError,
    WindowConfig,
    load_population_csv,
    prepare_series,
    read_case_file,
    synthesize_all,
    write_case_csv,
    zero_entry_diagnostics,
)
from dpfedcast.experiment import (
    CONFIG_KEYS,
    epsilon_label,
    load_config_file,
    parse_epsilon,
    run_experiment,
    validate_config,
)
from dpfedcast.federation import ConfigError


@click.group()
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for per-round detail")
def main(verbose: int) -> None:
    """Differentially private federated forecasting of regional case counts."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _config_options(fn):
    for key in reversed(list(CONFIG_KEYS)):
        fn = click.option(f"--{key}", key, default=None, help=CONFIG_KEYS[key][1])(fn)
    return fn


@main.command()
@click.option("--config", "config_file", type=click.Path(exists=True, dir_okay=False),
              help="flat key = value file; command-line flags override it")
@_config_options
def train(config_file: str | None, **flags: str | None) -> None:
    """Run the privacy sweep and write the result bundle."""
    raw = load_config_file(config_file) if config_file else {}
    raw.update({k: v for k, v in flags.items() if v is not None})
    try:
        config = validate_config(raw)
        for note in config.notes:
            click.echo(f"note: {note}", err=True)
        result = run_experiment(config)
    except ConfigError as exc:
        for err in exc.errors:
            click.echo(f"config error: {err}", err=True)
        sys.exit(2)
    except CaseDataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(2)

    for eps, agg in result.summary.items():
        parts = [f"{name}={s.mean:.4g}±{s.std:.2g}" for name, s in agg.items() if s.mean is not None]
        click.echo(f"epsilon={epsilon_label(eps)}: " + " ".join(parts))
    failed = [c for c in result.cells if not c.ok]
    for c in failed:
        click.echo(f"cell epsilon={epsilon_label(c.epsilon)} run={c.run} failed: {c.error}", err=True)
    click.echo(f"results in {result.output}")
    sys.exit(1 if failed else 0)


@main.command()
@click.option("--epsilon", "eps_text", default=None, help="target epsilon (give this or --c)")
@click.option("--c", "noise_multiplier", type=float, default=None, help="noise multiplier (give this or --epsilon)")
@click.option("--delta", type=float, default=accountant.DEFAULT_DELTA, show_default=True)
@click.option("--q", type=float, required=True, help="client sampling probability m / N_total")
@click.option("--T_cl", "rounds", type=int, required=True, help="federated rounds")
@click.option("--curve", type=click.Path(dir_okay=False, writable=True), default=None,
              help="write the composed RDP curve here instead of stdout")
def budget(eps_text, noise_multiplier, delta, q, rounds, curve) -> None:
    """Convert between a privacy budget and a noise multiplier."""
    if (eps_text is None) == (noise_multiplier is None):
        raise click.UsageError("give exactly one of --epsilon and --c")
    try:
        if eps_text is not None:
            eps_target = parse_epsilon(eps_text)
            c = accountant.calibrate_noise_multiplier(eps_target, delta, q, rounds)
        else:
            c = noise_multiplier
        composed = accountant.compose(accountant.subsampled_curve(q, c), rounds)
        eps, alpha = accountant.rdp_to_eps(composed, delta)
    except accountant.CalibrationError as exc:
        raise click.ClickException(str(exc)) from None
    except ValueError as exc:
        raise click.UsageError(str(exc)) from None

    click.echo(f"c={c!r}")
    click.echo(f"epsilon={eps!r}")
    click.echo(f"alpha={alpha:g}")
    out = open(curve, "w", newline="", encoding="utf-8") if curve else None
    try:
        if out is None:
            click.echo("")
        writer = csv.writer(out or sys.stdout, lineterminator="\n")
        writer.writerow(("alpha", "rdp"))
        for a, r in composed.items():
            writer.writerow((f"{a:g}", repr(r)))
    finally:
        if out is not None:
            out.close()


@main.command()
@click.option("--cases", type=click.Path(exists=True, dir_okay=False), required=True, help="county case CSV")
@click.option("--population", type=click.Path(exists=True, dir_okay=False), required=True,
              help="community_id,county_id,population CSV")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="community case CSV to write")
def synth(cases, population, seed, out) -> None:
    """Disaggregate county counts into synthetic community counts."""
    try:
        series = read_case_file(cases)
        with open(population, "rb") as fh:
            table = load_population_csv(fh)
    except CaseDataError as exc:
        raise click.ClickException(str(exc)) from None
    communities = synthesize_all(series, table, seed)
    write_case_csv(communities, out)
    click.echo(f"wrote {len(communities)} community series to {out}")


@main.command()
@click.option("--cases", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--H", "H", type=int, default=10, show_default=True)
@click.option("--P", "P", type=int, default=7, show_default=True)
@click.option("--smooth/--no-smooth", default=False, show_default=True,
              help="apply the 7-day moving average before counting zeros")
@click.option("--date", "prediction_day", default=None, help="prediction day (default: each series' last day)")
def diagnose(cases, H, P, smooth, prediction_day) -> None:
    """Histogram of regions by zero days in the H input days plus the prediction day."""
    try:
        cfg = WindowConfig(H, P, smooth)
        series = prepare_series(read_case_file(cases), cfg)
        day = date.fromisoformat(prediction_day) if prediction_day else None
    except (CaseDataError, ValueError) as exc:
        raise click.ClickException(str(exc)) from None
    hist = zero_entry_diagnostics(series, cfg, day)
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(("zero_days", "regions"))
    for k, n in enumerate(hist):
        writer.writerow((k, int(n)))


@main.command("make-benchmark")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--regions", type=int, default=400, show_default=True)
@click.option("--days", type=int, default=None, help="series length (default: benchmark length)")
@click.option("--seed", type=int, default=2022, show_default=True)
def make_benchmark_cmd(out, regions, days, seed) -> None:
    """Write the synthetic sinusoidal benchmark as a case CSV."""
    kwargs = {"n_days": days} if days else {}
    write_case_csv(make_benchmark(regions, seed=seed, **kwargs), out)
    click.echo(f"wrote {regions} regions to {out}")


if __name__ == "__main__":
    main()

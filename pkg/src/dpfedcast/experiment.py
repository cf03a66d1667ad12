"""Privacy sweeps: configuration, per-cell runs and the on-disk result bundle.

A sweep runs every (epsilon level, repetition) cell. Repetition ``r`` uses a
seed derived from the master seed, shared by all epsilon levels, so the
train/test split and the client-selection sequence are paired across levels.

Bundle layout::

    <output>/config.json                 resolved config, noise multiplier per level
    <output>/cells.csv                   epsilon,run,seed,status,error
    <output>/summary.csv                 epsilon,metric,mean,std
    <output>/boxplot.csv                 epsilon,client_id,run,mape
    <output>/boxstats.csv                five-number summary per level
    <output>/eps_<label>/run_<r>/metrics.json
    <output>/eps_<label>/run_<r>/history.csv
    <output>/eps_<label>/run_<r>/predictions.csv
    <output>/eps_<label>/run_<r>/model.ckpt
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from dpfedcast import accountant
from dpfedcast.data import (
    WindowConfig,
    WindowSample,
    build_windows,
    partition_by_client,
    prepare_series,
    read_case_file,
    split_train_test,
    stack_samples,
)
from dpfedcast.federation import (
    ClientState,
    ConfigError,
    FederationConfig,
    run_training,
    write_history_csv,
)
from dpfedcast.metrics import (
    METRIC_NAMES,
    MetricsReport,
    Summary,
    aggregate_runs,
    box_stats,
    evaluate,
    mape_distribution,
)
from dpfedcast.mlp import ModelParams, predict, save_checkpoint
from dpfedcast.rng import derive_seed

log = logging.getLogger(__name__)

INF_WORDS = {"inf", "infinity", "∞", "non-dp", "nondp", "none"}


def parse_epsilon(text: str) -> float:
    t = str(text).strip().lower()
    if t in INF_WORDS:
        return math.inf
    return float(t)


def epsilon_label(eps: float) -> str:
    return "inf" if math.isinf(eps) else f"{eps:g}"


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in {"1", "true", "yes", "on"}:
        return True
    if t in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in str(text).replace(" ", "").split(",") if p)


def _parse_optional_date(text: str) -> date | None:
    return None if str(text).strip() in {"", "none"} else date.fromisoformat(str(text).strip())


# key -> (parser for text values, help)
CONFIG_KEYS: dict[str, tuple[Callable[[str], Any], str]] = {
    "cases": (str, "case-count CSV (date,region_id,cases)"),
    "output": (str, "directory for the result bundle"),
    "start_date": (_parse_optional_date, "first day used for windows (YYYY-MM-DD)"),
    "end_date": (_parse_optional_date, "last day used for windows (YYYY-MM-DD)"),
    "H": (int, "input window length in days"),
    "P": (int, "prediction horizon in days"),
    "smooth": (_parse_bool, "apply the centered 7-day moving average"),
    "hidden": (_parse_ints, "hidden layer sizes, comma separated"),
    "eta": (float, "Adam learning rate"),
    "batch_size": (int, "local mini-batch size"),
    "N_total": (int, "total number of clients (default: regions in the data)"),
    "m": (float, "expected clients per round"),
    "q": (float, "client sampling probability; must equal m / N_total if given"),
    "T_cl": (int, "federated rounds"),
    "E": (int, "local epochs per round"),
    "epsilon": (lambda s: tuple(parse_epsilon(p) for p in str(s).split(",") if p.strip()),
                "privacy levels, comma separated; inf = no DP"),
    "delta": (float, "privacy failure probability"),
    "S": (float, "L2 clipping bound for client updates"),
    "c": (float, "fixed noise multiplier for every finite level (skips calibration)"),
    "runs": (int, "repetitions (seeds) per privacy level"),
    "seed": (int, "master seed"),
    "test_fraction": (float, "share of windows held out for testing"),
    "checkpoint_every": (int, "save the global model every k rounds (0 = off)"),
    "eval_every": (int, "record train/test loss every k rounds (0 = off)"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    cases: str
    output: str = "results"
    start_date: date | None = None
    end_date: date | None = None
    H: int = 10
    P: int = 7
    smooth: bool = True
    hidden: tuple[int, ...] = (128, 64, 32)
    eta: float = 1e-3
    batch_size: int = 32
    N_total: int | None = None
    m: float = 40
    q: float | None = None
    T_cl: int = 75
    E: int = 30
    epsilon: tuple[float, ...] = (0.3, 0.5, 1.0, 2.0, math.inf)
    delta: float = accountant.DEFAULT_DELTA
    S: float = 0.5
    c: float | None = None
    runs: int = 15
    seed: int = 0
    test_fraction: float = 0.1
    checkpoint_every: int = 0
    eval_every: int = 1
    notes: tuple[str, ...] = ()

    @property
    def window(self) -> WindowConfig:
        return WindowConfig(self.H, self.P, self.smooth)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.H, *self.hidden, 1)

    def federation(self, n_total: int, epsilon: float, noise_multiplier: float | None) -> FederationConfig:
        return FederationConfig(
            n_total=n_total, m=self.m, rounds=self.T_cl, epochs=self.E, lr=self.eta,
            batch_size=self.batch_size, clip=self.S, epsilon=epsilon, delta=self.delta,
            noise_multiplier=noise_multiplier, layer_sizes=self.layer_sizes,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["start_date"] = self.start_date.isoformat() if self.start_date else None
        d["end_date"] = self.end_date.isoformat() if self.end_date else None
        d["epsilon"] = [epsilon_label(e) for e in self.epsilon]
        d["hidden"] = list(self.hidden)
        d["notes"] = list(self.notes)
        return d


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"config line {lineno}: expected key = value"])
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def load_config_file(path: str | Path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def validate_config(raw: Mapping[str, Any] | ExperimentConfig) -> ExperimentConfig:
    """Parse and check a configuration, reporting every problem at once.

    Text values are parsed with the key's parser; other values are taken as
    they are. Raises :class:`ConfigError` listing all violations.
    """
    notes: list[str] = []
    if isinstance(raw, ExperimentConfig):
        notes.extend(raw.notes)
        # only explicitly changed fields count as "set"
        raw = {f.name: getattr(raw, f.name) for f in dataclasses.fields(raw)
               if f.name != "notes" and getattr(raw, f.name) != f.default}
    errors: list[str] = []
    values: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in CONFIG_KEYS:
            errors.append(f"{key}: unknown key")
            continue
        if value is None:
            continue
        parser = CONFIG_KEYS[key][0]
        try:
            values[key] = parser(value) if isinstance(value, str) else value
        except (TypeError, ValueError) as exc:
            errors.append(f"{key}: cannot parse {value!r} ({exc})")

    cases = values.get("cases")
    if not cases:
        errors.append("cases: required (path to the case-count CSV)")
    elif not Path(cases).is_file():
        errors.append(f"cases: file not found: {cases}")

    def check(key: str, ok: Callable[[Any], bool], message: str) -> None:
        if key in values and not ok(values[key]):
            errors.append(f"{key}: {message}, got {values[key]!r}")

    check("H", lambda v: v >= 1, "must be >= 1")
    check("P", lambda v: v >= 1, "must be >= 1")
    check("hidden", lambda v: all(n >= 1 for n in v), "sizes must be >= 1")
    check("eta", lambda v: v > 0, "must be > 0")
    check("batch_size", lambda v: v >= 1, "must be >= 1")
    check("N_total", lambda v: v >= 1, "must be >= 1")
    check("m", lambda v: v > 0, "must be > 0")
    check("q", lambda v: 0 < v <= 1, "must be in (0, 1]")
    check("T_cl", lambda v: v >= 0, "must be >= 0")
    check("E", lambda v: v >= 0, "must be >= 0")
    check("runs", lambda v: v >= 1, "must be >= 1")
    check("delta", lambda v: 0 < v < 1, "must be in (0, 1)")
    check("S", lambda v: v > 0, "must be > 0")
    check("c", lambda v: v >= 0, "must be >= 0")
    check("test_fraction", lambda v: 0 <= v < 1, "must be in [0, 1)")
    check("checkpoint_every", lambda v: v >= 0, "must be >= 0")
    check("eval_every", lambda v: v >= 0, "must be >= 0")

    eps = values.get("epsilon", ExperimentConfig.epsilon)
    eps = tuple(eps) if isinstance(eps, (list, tuple)) else (parse_epsilon(eps),)
    values["epsilon"] = eps
    if not eps:
        errors.append("epsilon: at least one privacy level is required")
    if any(not e > 0 for e in eps):
        errors.append(f"epsilon: levels must be > 0 or inf, got {[epsilon_label(e) for e in eps]}")
    if len(set(eps)) != len(eps):
        errors.append("epsilon: levels must be distinct")
    if all(math.isinf(e) for e in eps) and "delta" in values:
        notes.append("delta ignored: no finite epsilon level")
    if any(math.isfinite(e) for e in eps) and values.get("T_cl", ExperimentConfig.T_cl) == 0 and "c" not in values:
        errors.append("T_cl: must be >= 1 to calibrate noise for finite epsilon")
    if "c" in values and any(math.isfinite(e) for e in eps):
        notes.append("fixed noise multiplier c used for every finite level; config.json records the epsilon it achieves")

    n_total = values.get("N_total")
    if "q" in values:
        if n_total is None:
            errors.append("q: needs N_total to derive or check m")
        elif "m" not in values:
            values["m"] = values["q"] * n_total
        elif not math.isclose(values["m"] / n_total, values["q"], rel_tol=1e-9):
            errors.append(f"q: {values['q']} does not equal m / N_total = {values['m'] / n_total}")
    m = values.get("m", ExperimentConfig.m)
    if n_total is not None and m > n_total:
        errors.append(f"m: q > 1 (m={m:g} exceeds N_total={n_total})")

    start, end = values.get("start_date"), values.get("end_date")
    if start and end and start > end:
        errors.append(f"start_date: {start} is after end_date {end}")

    if errors:
        raise ConfigError(errors)
    if n_total is not None:
        values["q"] = m / n_total
    return ExperimentConfig(**values, notes=tuple(dict.fromkeys(notes)))


@dataclass
class CellResult:
    epsilon: float
    run: int
    seed: int
    metrics: MetricsReport | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SweepResult:
    output: Path
    config: ExperimentConfig
    n_total: int
    noise: dict[float, dict[str, Any]]
    cells: list[CellResult] = field(default_factory=list)
    summary: dict[float, dict[str, Summary]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.cells)

    def reports(self, eps: float) -> list[MetricsReport]:
        return [c.metrics for c in self.cells if c.epsilon == eps and c.metrics is not None]


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _json_text(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def emit_predictions(model: ModelParams, test: Sequence[WindowSample], path: str | Path) -> None:
    """One CSV row per test window: client_id, y_true, y_pred."""
    X, y = stack_samples(test, model.layer_sizes[0])
    y_hat = predict(model, X)
    rows = [(s.region_id, repr(float(t)), repr(float(p))) for s, t, p in zip(test, y, y_hat)]
    _atomic_write(Path(path), _csv_text(("client_id", "y_true", "y_pred"), rows))


def _clients_for(train: Sequence[WindowSample], regions: Sequence[str], H: int) -> list[ClientState]:
    parts = partition_by_client(train)
    return [ClientState(r, *stack_samples(parts.get(r, []), H)) for r in regions]


def _noise_for_levels(config: ExperimentConfig, q: float) -> dict[float, dict[str, Any]]:
    noise: dict[float, dict[str, Any]] = {}
    for eps in config.epsilon:
        if math.isinf(eps):
            noise[eps] = {"c": 0.0, "sigma": 0.0, "achieved_epsilon": None, "alpha": None, "error": None}
            continue
        try:
            if config.c is not None:
                c = config.c
            else:
                c = accountant.calibrate_noise_multiplier(eps, config.delta, q, config.T_cl)
            achieved, alpha = accountant.epsilon_for(c, config.delta, q, config.T_cl) if c > 0 else (math.inf, None)
            noise[eps] = {"c": c, "sigma": accountant.noise_std(config.S, c, config.m),
                          "achieved_epsilon": achieved if math.isfinite(achieved) else None,
                          "alpha": alpha, "error": None}
        except (accountant.CalibrationError, ValueError) as exc:
            log.error("calibration failed for epsilon=%s: %s", epsilon_label(eps), exc)
            noise[eps] = {"c": None, "sigma": None, "achieved_epsilon": None, "alpha": None, "error": str(exc)}
    return noise


def run_experiment(config: ExperimentConfig) -> SweepResult:
    """Run every (epsilon, repetition) cell and write the result bundle."""
    config = validate_config(config)
    out = Path(config.output)
    series = prepare_series(read_case_file(config.cases), config.window, config.start_date, config.end_date)
    regions = sorted(series)
    n_total = config.N_total if config.N_total is not None else len(regions)
    if n_total != len(regions):
        raise ConfigError([f"N_total: {n_total} configured but the data has {len(regions)} regions"])
    if config.m > n_total:
        raise ConfigError([f"m: q > 1 (m={config.m:g} exceeds N_total={n_total})"])
    samples = [s for r in regions for s in build_windows(series[r], config.window)]
    if not samples:
        raise ConfigError(["cases: no region is long enough for a single window in the date range"])
    q = config.m / n_total
    noise = _noise_for_levels(config, q)

    resolved = config.to_dict() | {
        "N_total": n_total,
        "q": q,
        "n_windows": len(samples),
        "noise": {epsilon_label(e): v for e, v in noise.items()},
    }
    _atomic_write(out / "config.json", _json_text(resolved))

    result = SweepResult(out, config, n_total, noise)
    run_seeds = [derive_seed(config.seed, "run", r) for r in range(config.runs)]
    splits = {}
    for r, run_seed in enumerate(run_seeds):
        train, test = split_train_test(samples, config.test_fraction, derive_seed(run_seed, "split"))
        splits[r] = (train, test)

    for eps in config.epsilon:
        label = epsilon_label(eps)
        for r, run_seed in enumerate(run_seeds):
            cell = CellResult(eps, r, run_seed)
            result.cells.append(cell)
            if noise[eps]["error"] is not None:
                cell.error = f"calibration failed: {noise[eps]['error']}"
                continue
            train, test = splits[r]
            cell_dir = out / f"eps_{label}" / f"run_{r:02d}"
            try:
                cell.metrics = _run_cell(config, n_total, eps, noise[eps]["c"], r, run_seed,
                                         regions, train, test, cell_dir)
            except Exception as exc:  # one bad cell must not sink the sweep
                log.exception("cell epsilon=%s run=%d failed", label, r)
                cell.error = f"{type(exc).__name__}: {exc}"
            else:
                log.info("epsilon=%s run=%d: R2=%s MAPE=%s", label, r, cell.metrics.r2, cell.metrics.mape_percent)

    _write_summaries(result)
    return result


def _run_cell(
    config: ExperimentConfig, n_total: int, eps: float, c: float | None, run: int, run_seed: int,
    regions: Sequence[str], train: Sequence[WindowSample], test: Sequence[WindowSample], cell_dir: Path,
) -> MetricsReport:
    clients = _clients_for(train, regions, config.H)
    fed = config.federation(n_total, eps, c if math.isfinite(eps) else None)

    X_train, y_train = stack_samples(train, config.H)
    X_test, y_test = stack_samples(test, config.H)
    counter = {"round": 0}

    def round_losses(params: ModelParams) -> tuple[float, float]:
        counter["round"] += 1
        i = counter["round"]
        if config.eval_every <= 0 or (i % config.eval_every and i != config.T_cl):
            return math.nan, math.nan

        def mse(X: np.ndarray, y: np.ndarray) -> float:
            return float(np.mean((predict(params, X) - y) ** 2)) if len(y) else math.nan

        return mse(X_train, y_train), mse(X_test, y_test)

    model, history = run_training(
        fed, clients, derive_seed(run_seed, "train"), evaluate=round_losses,
        checkpoint_dir=cell_dir / "checkpoints" if config.checkpoint_every else None,
        checkpoint_every=config.checkpoint_every,
    )
    report = evaluate(model, test)
    cell_dir.mkdir(parents=True, exist_ok=True)
    write_history_csv(history, cell_dir / "history.csv")
    emit_predictions(model, test, cell_dir / "predictions.csv")
    save_checkpoint(cell_dir / "model.ckpt", model, round_index=config.T_cl)
    payload = {"epsilon": epsilon_label(eps), "run": run, "seed": run_seed,
               "metrics": _finite_or_none(report.to_dict())}
    _atomic_write(cell_dir / "metrics.json", _json_text(payload))
    return report


def _finite_or_none(obj: Any) -> Any:
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite_or_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite_or_none(v) for v in obj]
    return obj


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def _write_summaries(result: SweepResult) -> None:
    out = result.output
    cell_rows = [(epsilon_label(c.epsilon), c.run, c.seed, "ok" if c.ok else "error", c.error or "")
                 for c in result.cells]
    _atomic_write(out / "cells.csv", _csv_text(("epsilon", "run", "seed", "status", "error"), cell_rows))

    summary_rows = []
    for eps in result.config.epsilon:
        reports = result.reports(eps)
        if not reports:
            continue
        agg = aggregate_runs(reports)
        result.summary[eps] = agg
        for name in METRIC_NAMES:
            summary_rows.append((epsilon_label(eps), name, _fmt(agg[name].mean), _fmt(agg[name].std)))
    _atomic_write(out / "summary.csv", _csv_text(("epsilon", "metric", "mean", "std"), summary_rows))

    box_rows = []
    for c in result.cells:
        if c.metrics is None:
            continue
        for cid, v in sorted(c.metrics.per_client.items()):
            if v is not None:
                box_rows.append((epsilon_label(c.epsilon), cid, c.run, repr(float(v))))
    _atomic_write(out / "boxplot.csv", _csv_text(("epsilon", "client_id", "run", "mape"), box_rows))

    dist = mape_distribution({eps: result.reports(eps) for eps in result.summary})
    stat_rows = []
    for eps, values in dist.items():
        if not values:
            continue
        b = box_stats(values)
        stat_rows.append((epsilon_label(eps), b.n, repr(b.minimum), repr(b.q1), repr(b.median), repr(b.q3),
                          repr(b.maximum), repr(b.whisker_low), repr(b.whisker_high), len(b.outliers)))
    _atomic_write(out / "boxstats.csv", _csv_text(
        ("epsilon", "n", "min", "q1", "median", "q3", "max", "whisker_low", "whisker_high", "n_outliers"),
        stat_rows))

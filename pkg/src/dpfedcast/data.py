"""Regional daily case-count series: ingestion, smoothing, windowing, splits.

Input files are plain CSV:

* case counts: ``date,region_id,cases`` with ISO dates and non-negative counts
* populations: ``community_id,county_id,population``

Days missing from a region's series are stored as zero reported cases.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Sequence

import numpy as np

from dpfedcast.rng import derive_seed

log = logging.getLogger(__name__)

CASE_HEADER = ("date", "region_id", "cases")
POPULATION_HEADER = ("community_id", "county_id", "population")


class CaseDataError(ValueError):
    """Raised for unreadable or invalid input files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class RegionSeries:
    region_id: str
    start_date: date
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise ValueError("series values must be one-dimensional")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError(f"region {self.region_id}: case counts must be finite and >= 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def end_date(self) -> date:
        return self.start_date + timedelta(days=len(self.values) - 1)

    def index_of(self, day: date) -> int:
        return (day - self.start_date).days

    def restrict(self, start: date | None = None, end: date | None = None) -> "RegionSeries":
        """Cut the series to ``[start, end]`` (inclusive, either bound optional)."""
        lo = 0 if start is None else max(0, self.index_of(start))
        hi = len(self) if end is None else min(len(self), self.index_of(end) + 1)
        hi = max(hi, lo)
        return RegionSeries(self.region_id, self.start_date + timedelta(days=lo), self.values[lo:hi])


@dataclass(frozen=True)
class WindowConfig:
    H: int = 10
    P: int = 7
    smooth: bool = True

    def __post_init__(self) -> None:
        if self.H < 1 or self.P < 1:
            raise ValueError(f"window length and horizon must be >= 1 (got H={self.H}, P={self.P})")


@dataclass(frozen=True)
class WindowSample:
    """One supervised pair. ``region_id`` is routing metadata, not a feature."""

    region_id: str
    x: np.ndarray = field(repr=False)
    y: float


@dataclass(frozen=True)
class Community:
    county_id: str
    population: int


PopulationTable = Mapping[str, Community]


def _text_stream(source: BinaryIO | io.TextIOBase) -> io.TextIOBase:
    if isinstance(source, io.TextIOBase):
        return source
    # utf-8-sig tolerates spreadsheet BOMs; newline="" lets csv handle CRLF
    return io.TextIOWrapper(source, encoding="utf-8-sig", newline="")


def _check_header(reader, expected: tuple[str, ...]) -> None:
    try:
        header = next(reader)
    except StopIteration:
        raise CaseDataError(f"missing header, expected {','.join(expected)}", line=1) from None
    if tuple(h.strip() for h in header) != expected:
        raise CaseDataError(f"bad header {header!r}, expected {','.join(expected)}", line=1)


def load_case_csv(source: BinaryIO) -> dict[str, RegionSeries]:
    """Parse a case-count CSV into one gap-free series per region.

    Same-day rows for one region are summed. Each region spans its own
    first to last reported date.
    """
    reader = csv.reader(_text_stream(source))
    _check_header(reader, CASE_HEADER)
    counts: dict[str, dict[date, float]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise CaseDataError(f"expected 3 fields, got {len(row)}", line=lineno)
        raw_date, region, raw_cases = (cell.strip() for cell in row)
        try:
            day = date.fromisoformat(raw_date)
        except ValueError:
            raise CaseDataError(f"bad date {raw_date!r}", line=lineno) from None
        try:
            cases = float(raw_cases)
        except ValueError:
            raise CaseDataError(f"bad case count {raw_cases!r}", line=lineno) from None
        if not np.isfinite(cases):
            raise CaseDataError(f"non-finite case count {raw_cases!r}", line=lineno)
        if cases < 0:
            raise CaseDataError(f"negative case count {cases:g} for region {region}", line=lineno)
        if not region:
            raise CaseDataError("empty region_id", line=lineno)
        per_day = counts.setdefault(region, {})
        per_day[day] = per_day.get(day, 0.0) + cases

    out: dict[str, RegionSeries] = {}
    for region in sorted(counts):
        per_day = counts[region]
        first = min(per_day)
        values = np.zeros((max(per_day) - first).days + 1)
        for day, cases in per_day.items():
            values[(day - first).days] = cases
        out[region] = RegionSeries(region, first, values)
    return out


def read_case_file(path: str | Path) -> dict[str, RegionSeries]:
    with open(path, "rb") as fh:
        return load_case_csv(fh)


def write_case_csv(series_map: Mapping[str, RegionSeries], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CASE_HEADER)
        for region in sorted(series_map):
            s = series_map[region]
            for i, v in enumerate(s.values):
                day = s.start_date + timedelta(days=i)
                writer.writerow([day.isoformat(), region, f"{v:.12g}"])


def load_population_csv(source: BinaryIO) -> dict[str, Community]:
    reader = csv.reader(_text_stream(source))
    _check_header(reader, POPULATION_HEADER)
    table: dict[str, Community] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise CaseDataError(f"expected 3 fields, got {len(row)}", line=lineno)
        community, county, raw_pop = (cell.strip() for cell in row)
        try:
            population = int(raw_pop)
        except ValueError:
            raise CaseDataError(f"bad population {raw_pop!r}", line=lineno) from None
        if population <= 0:
            raise CaseDataError(f"population must be positive, got {population}", line=lineno)
        if community in table and table[community].county_id != county:
            raise CaseDataError(f"community {community} listed under two counties", line=lineno)
        table[community] = Community(county, population)
    return table


def moving_average_centered(series: RegionSeries, window: int = 7) -> RegionSeries:
    """Centered moving average; the window shrinks to what is available at the edges."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"moving-average window must be odd and >= 1, got {window}")
    values = series.values
    n = len(values)
    if n == 0:
        return series
    half = window // 2
    padded = np.pad(values, half, constant_values=np.nan)
    neighbourhood = np.lib.stride_tricks.sliding_window_view(padded, window)
    # averaging offsets from the centre value keeps constant stretches exact
    smoothed = values + np.nanmean(neighbourhood - values[:, None], axis=1)
    return RegionSeries(series.region_id, series.start_date, np.maximum(smoothed, 0.0))


def build_windows(series: RegionSeries, cfg: WindowConfig) -> list[WindowSample]:
    """All (last H days, value P days later) pairs that fit inside the series."""
    values = series.values
    n_samples = max(0, len(values) - cfg.H - cfg.P + 1)
    if n_samples == 0:
        return []
    inputs = np.lib.stride_tricks.sliding_window_view(values, cfg.H)[:n_samples]
    targets = values[cfg.H - 1 + cfg.P:]
    return [
        WindowSample(series.region_id, inputs[i].copy(), float(targets[i]))
        for i in range(n_samples)
    ]


def split_train_test(
    samples: Sequence[WindowSample], test_fraction: float = 0.1, seed: int = 0
) -> tuple[list[WindowSample], list[WindowSample]]:
    """Uniform random split over the pooled samples of all regions.

    Both halves keep the input order.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    n = len(samples)
    n_test = round(test_fraction * n)
    perm = np.random.default_rng(seed).permutation(n)
    is_test = np.zeros(n, dtype=bool)
    is_test[perm[:n_test]] = True
    train = [s for s, t in zip(samples, is_test) if not t]
    test = [s for s, t in zip(samples, is_test) if t]
    return train, test


def partition_by_client(samples: Iterable[WindowSample]) -> dict[str, list[WindowSample]]:
    groups: dict[str, list[WindowSample]] = {}
    for s in samples:
        groups.setdefault(s.region_id, []).append(s)
    return {k: groups[k] for k in sorted(groups)}


def stack_samples(samples: Sequence[WindowSample], H: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Feature matrix and target vector; the region tag is dropped here."""
    if not samples:
        width = 0 if H is None else H
        return np.zeros((0, width)), np.zeros(0)
    X = np.stack([s.x for s in samples]).astype(float)
    y = np.array([s.y for s in samples], dtype=float)
    return X, y


def prepare_series(
    series_map: Mapping[str, RegionSeries],
    cfg: WindowConfig,
    start: date | None = None,
    end: date | None = None,
) -> dict[str, RegionSeries]:
    """Smooth (if configured) over the full series, then cut to the date range."""
    out = {}
    for region in sorted(series_map):
        s = series_map[region]
        if cfg.smooth:
            s = moving_average_centered(s)
        out[region] = s.restrict(start, end)
    return out


def synthesize_communities(
    county: RegionSeries, communities: PopulationTable, seed: int
) -> dict[str, RegionSeries]:
    """Split a county's daily counts into communities by a population-weighted multinomial.

    ``communities`` must only contain the county's own communities. Counts are
    rounded to whole cases first; every day's community counts add up to the
    rounded county count.
    """
    if not communities:
        raise ValueError(f"county {county.region_id}: no communities to distribute cases over")
    ids = sorted(communities)
    foreign = [c for c in ids if communities[c].county_id != county.region_id]
    if foreign:
        raise ValueError(f"communities {foreign[:3]} do not belong to county {county.region_id}")
    pops = np.array([communities[c].population for c in ids], dtype=float)
    pvals = pops / pops.sum()
    daily = np.rint(county.values).astype(np.int64)
    draws = np.random.default_rng(seed).multinomial(daily, pvals)
    if draws.ndim == 1:  # empty series
        draws = draws.reshape(len(daily), len(ids))
    return {c: RegionSeries(c, county.start_date, draws[:, j].astype(float)) for j, c in enumerate(ids)}


def synthesize_all(
    series_map: Mapping[str, RegionSeries], table: PopulationTable, seed: int
) -> dict[str, RegionSeries]:
    """Disaggregate every county that has both case data and communities."""
    by_county: dict[str, dict[str, Community]] = {}
    for cid, com in table.items():
        by_county.setdefault(com.county_id, {})[cid] = com
    out: dict[str, RegionSeries] = {}
    for county_id in sorted(series_map):
        members = by_county.get(county_id)
        if not members:
            log.warning("county %s has no communities in the population table; skipped", county_id)
            continue
        out.update(synthesize_communities(series_map[county_id], members, derive_seed(seed, "synth", county_id)))
    missing = sorted(set(by_county) - set(series_map))
    if missing:
        log.warning("%d counties in the population table have no case data", len(missing))
    return dict(sorted(out.items()))


def zero_entry_diagnostics(
    series_map: Mapping[str, RegionSeries], cfg: WindowConfig, prediction_day: date | None = None
) -> np.ndarray:
    """Histogram of regions by zero days among the H inputs plus the prediction day.

    The evaluated window is the one whose target is ``prediction_day`` (default:
    each series' last day). Entry ``k`` of the result counts regions with
    exactly ``k`` zeros, for ``k`` in ``0..H+1``. Regions too short for the
    window are left out.
    """
    hist = np.zeros(cfg.H + 2, dtype=int)
    for region in sorted(series_map):
        s = series_map[region]
        target = len(s) - 1 if prediction_day is None else s.index_of(prediction_day)
        first = target - cfg.P - cfg.H + 1
        if first < 0 or target >= len(s):
            log.debug("region %s too short for the diagnostic window", region)
            continue
        days = np.append(s.values[first:first + cfg.H], s.values[target])
        hist[int(np.count_nonzero(days == 0))] += 1
    return hist

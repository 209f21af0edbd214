"""Click events, time binning, and the traffic matrix fed to inference.

A clickstream is an ordered sequence of ad clicks. Each click carries a
timestamp, an opaque source identifier (IP, device id, ...) and, for
synthetic data, a ground-truth label. Inference never looks at anything
but timing and source: the matrix built here counts clicks per source
per fixed-width time bin.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np


class Label(Enum):
    """Ground truth attached to a click. Ingested real data is UNKNOWN."""

    LEGIT = "legit"
    ORGANIC_SPAM = "organic"
    INORGANIC_SPAM = "inorganic"
    BAIT = "bait"
    UNKNOWN = "unknown"

    @property
    def is_spam(self) -> bool:
        return self in (Label.ORGANIC_SPAM, Label.INORGANIC_SPAM)


@dataclass(frozen=True)
class ClickEvent:
    """One ad click. Timestamps are real-valued seconds since epoch."""

    timestamp: float
    source: str
    ad_url: str = ""
    referrer_url: str = ""
    user_agent: str = ""
    label: Label = Label.UNKNOWN

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"timestamp must be >= 0, got {self.timestamp}")


SECONDS_PER_DAY = 86400.0


@dataclass(frozen=True)
class TimeBinConfig:
    """Fixed-width binning of a time window.

    Defaults give five-minute bins, i.e. 288 bins per day. Bins are
    half-open [start, start + bin_width): a click exactly on a boundary
    belongs to the later bin.
    """

    bin_width: float = 300.0
    window_start: float = 0.0
    num_bins: int = 288

    def __post_init__(self):
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if self.num_bins < 1:
            raise ValueError("num_bins must be >= 1")

    @classmethod
    def for_days(cls, days: int, window_start: float = 0.0,
                 bin_width: float = 300.0) -> "TimeBinConfig":
        per_day = SECONDS_PER_DAY / bin_width
        if per_day != int(per_day):
            raise ValueError("bin_width must divide a day evenly")
        return cls(bin_width=bin_width, window_start=window_start,
                   num_bins=int(per_day) * days)

    @property
    def bins_per_day(self) -> Optional[int]:
        per_day = SECONDS_PER_DAY / self.bin_width
        return int(per_day) if per_day == int(per_day) else None

    @property
    def window_end(self) -> float:
        return self.window_start + self.bin_width * self.num_bins


def bin_index(timestamp: float, config: TimeBinConfig) -> Optional[int]:
    """Map a timestamp to its bin, or None when it falls outside the window.

    Callers must count the None results: out-of-window clicks are
    reported as discards, never silently dropped.
    """
    idx = int(np.floor((timestamp - config.window_start) / config.bin_width))
    if 0 <= idx < config.num_bins:
        return idx
    return None


@dataclass(frozen=True)
class TrafficMatrix:
    """Per-source click counts over time bins.

    counts[i, j] is the number of clicks from sources[i] in bin j. The
    matrix is immutable after construction; the cell total equals the
    number of in-window clicks used to build it.
    """

    counts: np.ndarray
    sources: tuple[str, ...]
    bin_config: TimeBinConfig

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ValueError("counts must be 2-dimensional")
        if counts.shape != (len(self.sources), self.bin_config.num_bins):
            raise ValueError(
                f"counts shape {counts.shape} does not match "
                f"{len(self.sources)} sources x {self.bin_config.num_bins} bins")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if len(set(self.sources)) != len(self.sources):
            raise ValueError("duplicate source identifiers")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "sources", tuple(self.sources))

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    def row_of(self, source: str) -> int:
        return self.sources.index(source)


def build_traffic_matrix(
    clicks: Sequence[ClickEvent], config: TimeBinConfig
) -> tuple[TrafficMatrix, int]:
    """Count clicks per (source, bin); returns (matrix, discarded).

    One row per distinct source, in order of first appearance in the
    click list; `discarded` tallies out-of-window clicks. Empty input
    yields a 0 x num_bins matrix.
    """
    order: dict[str, int] = {}
    rows: list[np.ndarray] = []
    discarded = 0
    for click in clicks:
        j = bin_index(click.timestamp, config)
        if j is None:
            discarded += 1
            continue
        i = order.get(click.source)
        if i is None:
            i = len(order)
            order[click.source] = i
            rows.append(np.zeros(config.num_bins, dtype=np.int64))
        rows[i][j] += 1
    counts = (np.array(rows, dtype=np.int64) if rows
              else np.zeros((0, config.num_bins), dtype=np.int64))
    return TrafficMatrix(counts, tuple(order), config), discarded


def fold_by_day(matrix: TrafficMatrix) -> TrafficMatrix:
    """Reshape an n-source matrix spanning D days into n*D one-day rows.

    Row order is source-major: rows for source i occupy indices
    i*D .. i*D+D-1 with day ascending, named "<source>@d<k>". Inference
    runs on folded matrices so that a timing pattern reused on any day,
    by any source, repeats across rows of a single 288-column matrix.
    """
    cfg = matrix.bin_config
    per_day = cfg.bins_per_day
    if per_day is None or cfg.num_bins % per_day != 0:
        raise ValueError("bin window is not a whole number of days")
    days = cfg.num_bins // per_day
    if days == 1:
        return matrix
    folded = matrix.counts.reshape(matrix.num_sources * days, per_day)
    names = tuple(f"{s}@d{d}" for s in matrix.sources for d in range(days))
    day_cfg = TimeBinConfig(bin_width=cfg.bin_width,
                            window_start=cfg.window_start, num_bins=per_day)
    return TrafficMatrix(folded.copy(), names, day_cfg)


def folded_row_index(source_row: int, day: int, days: int) -> int:
    return source_row * days + day


def interclick_times(clicks: Sequence[ClickEvent]) -> np.ndarray:
    """Consecutive timestamp differences for one source's sorted clicks.

    Rejects unsorted input. Simultaneous clicks are allowed (gap 0).
    """
    ts = np.array([c.timestamp for c in clicks], dtype=float)
    if len(ts) >= 2 and np.any(np.diff(ts) < 0):
        raise ValueError("clicks must be sorted ascending by timestamp")
    return np.diff(ts)


# --- clickstream file format -------------------------------------------------
#
# One record per line, comma separated, header required:
#   timestamp,source,ad_url,referrer_url,user_agent,label
# with label one of legit|organic|inorganic|bait|unknown. UTF-8,
# timestamps as decimal seconds.

CSV_HEADER = ["timestamp", "source", "ad_url", "referrer_url", "user_agent", "label"]


class ClickstreamFormatError(Exception):
    """Raised when a clickstream file cannot be parsed at all."""


@dataclass
class ParseError:
    line_number: int
    line: str
    reason: str


@dataclass
class ParsedClickstream:
    clicks: list[ClickEvent]
    errors: list[ParseError] = field(default_factory=list)


def write_clickstream(clicks: Iterable[ClickEvent], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for c in clicks:
            writer.writerow([repr(c.timestamp), c.source, c.ad_url,
                             c.referrer_url, c.user_agent, c.label.value])


def read_clickstream(path) -> ParsedClickstream:
    """Parse a clickstream file; malformed lines go to the error report.

    A missing or wrong header is fatal (the file is not a clickstream);
    individual bad records are collected with their line numbers and the
    rest of the file is still parsed.
    """
    with open(path, "r", newline="", encoding="utf-8") as f:
        return _parse_clickstream(f)


def _parse_clickstream(f) -> ParsedClickstream:
    reader = csv.reader(f)
    try:
        header = next(reader)
    except StopIteration:
        raise ClickstreamFormatError("missing header line")
    if [h.strip() for h in header] != CSV_HEADER:
        raise ClickstreamFormatError(
            f"bad header: expected {','.join(CSV_HEADER)}")
    out = ParsedClickstream(clicks=[])
    tokens = {label.value: label for label in Label}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        raw = ",".join(row)
        if len(row) != len(CSV_HEADER):
            out.errors.append(ParseError(lineno, raw, "wrong field count"))
            continue
        ts_text, source, ad_url, referrer, ua, label_text = row
        try:
            ts = float(ts_text)
        except ValueError:
            out.errors.append(ParseError(lineno, raw, "unparseable timestamp"))
            continue
        label = tokens.get(label_text.strip())
        if label is None:
            out.errors.append(ParseError(lineno, raw,
                                         f"unknown label {label_text!r}"))
            continue
        try:
            out.clicks.append(ClickEvent(ts, source, ad_url, referrer, ua, label))
        except ValueError as exc:
            out.errors.append(ParseError(lineno, raw, str(exc)))
    return out


def parse_clickstream_text(text: str) -> ParsedClickstream:
    return _parse_clickstream(io.StringIO(text))

"""Active defence: injected bait-click patterns and mimicry detection.

The ad network plants a short train of clicks with a fixed inter-click
delay into targeted devices, at the same time of day every day, and
ignores those clicks itself. Malware that harvests device activity
cannot tell bait from genuine clicks, so replayed traffic echoes the
bait train. Detection factorizes the (bait-stripped) traffic with the
bait timing patterns frozen into the first pattern rows; the share of a
source's activation that lands on bait rows is its fraud fraction.

A replayed echo keeps the bait's inter-click delay but may be shifted
in time, so each configured pattern is frozen together with bin-shifted
copies covering the expected dispatch jitter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .clickstream import (ClickEvent, Label, TimeBinConfig, TrafficMatrix,
                          SECONDS_PER_DAY, fold_by_day)
from .nmf import FactorizationConfig, MultiLayerFactorization, multilayer_factorize
from .synth import LabeledClickSet

DEFAULT_FLAG_THRESHOLD = 0.05
# Bin-shifted frozen copies per pattern: +- one hour of dispatch delay
# at five-minute bins, mirroring the pooling halfwidth.
DEFAULT_SHIFT_HALFWIDTH = 12


@dataclass(frozen=True)
class BaitPattern:
    """A bait-click train: `count` clicks exactly `delta` seconds apart.

    `timestamps` is the canonical placement inside a one-day bin window;
    `as_row` is the corresponding binned row with exactly `count` ones.
    Deltas below the bin width would collapse clicks into one cell and
    are rejected.
    """

    delta: float
    count: int
    start_bin: int
    timestamps: tuple[float, ...]
    as_row: np.ndarray

    def __post_init__(self):
        self.as_row.setflags(write=False)


def make_bait_pattern(delta: float, count: int, start: float,
                      bin_config: TimeBinConfig) -> BaitPattern:
    """Build the click train t0=start, t_k = t_{k-1} + delta and its row."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if count < 2:
        raise ValueError("count must be >= 2")
    if delta < bin_config.bin_width:
        raise ValueError(
            f"delta {delta}s below bin width {bin_config.bin_width}s: "
            "bait clicks would collapse into one cell")
    times = [float(start)]
    for _ in range(count - 1):
        times.append(times[-1] + delta)
    row = np.zeros(bin_config.num_bins)
    bins = []
    for t in times:
        idx = int(np.floor((t - bin_config.window_start) / bin_config.bin_width))
        if not 0 <= idx < bin_config.num_bins:
            raise ValueError(f"bait click at {t} falls outside the bin window")
        bins.append(idx)
        row[idx] = 1.0
    return BaitPattern(delta=float(delta), count=count, start_bin=bins[0],
                       timestamps=tuple(times), as_row=row)


@dataclass(frozen=True)
class BaitConfig:
    """Patterns to inject plus targeting and flagging parameters."""

    patterns: tuple[BaitPattern, ...]
    target_sources: tuple[str, ...]
    flag_threshold: float = DEFAULT_FLAG_THRESHOLD

    def __post_init__(self):
        object.__setattr__(self, "patterns", tuple(self.patterns))
        object.__setattr__(self, "target_sources", tuple(self.target_sources))
        deltas = [p.delta for p in self.patterns]
        if len(set(deltas)) != len(deltas):
            raise ValueError("bait patterns must have pairwise distinct deltas")
        if not 0 <= self.flag_threshold <= 1:
            raise ValueError("flag_threshold must be in [0, 1]")


def schedule_bait(
    deltas: Sequence[float],
    count: int,
    targets: Sequence[str],
    seed: int = 0,
    bin_config: Optional[TimeBinConfig] = None,
    flag_threshold: float = DEFAULT_FLAG_THRESHOLD,
) -> BaitConfig:
    """Place one pattern per delta at a seeded random time of day.

    Each pattern keeps the same start bin every day, so day-shifted
    replays of harvested traffic still line up with it.
    """
    day = bin_config or TimeBinConfig()
    rng = np.random.default_rng(seed)
    patterns = []
    for delta in deltas:
        span_bins = int(np.ceil(((count - 1) * delta) / day.bin_width)) + 1
        latest = day.num_bins - span_bins
        if latest < 0:
            raise ValueError(f"pattern delta={delta} count={count} "
                             "does not fit in one day")
        start_bin = int(rng.integers(0, latest + 1))
        start = day.window_start + (start_bin + 0.5) * day.bin_width
        patterns.append(make_bait_pattern(delta, count, start, day))
    return BaitConfig(tuple(patterns), tuple(targets), flag_threshold)


def _daily_times(pattern: BaitPattern, day_start: float, day_window_start: float):
    base = day_start - day_window_start
    return [base + t for t in pattern.timestamps]


def inject_bait(clicks: LabeledClickSet, config: BaitConfig) -> LabeledClickSet:
    """Append bait clicks for each target source, one train per pattern per day."""
    if not config.target_sources:
        return clicks
    days = int(np.ceil(clicks.duration_days))
    day_cfg_start = 0.0  # canonical pattern timestamps are day-relative
    added: list[ClickEvent] = []
    for d in range(days):
        day_start = clicks.window_start + d * SECONDS_PER_DAY
        for pattern in config.patterns:
            times = _daily_times(pattern, day_start, day_cfg_start)
            if times[-1] >= clicks.window_end:
                continue
            for source in config.target_sources:
                added.extend(ClickEvent(t, source, label=Label.BAIT)
                             for t in times)
    merged = sorted(clicks.clicks + tuple(added),
                    key=lambda c: (c.timestamp, c.source))
    provenance = dict(clicks.provenance)
    provenance["bait.deltas"] = ",".join(repr(p.delta) for p in config.patterns)
    provenance["bait.count"] = ",".join(str(p.count) for p in config.patterns)
    provenance["bait.start_bins"] = ",".join(str(p.start_bin) for p in config.patterns)
    provenance["bait.targets"] = ",".join(config.target_sources)
    return LabeledClickSet(tuple(merged), provenance, clicks.window_start,
                           clicks.duration_days)


def strip_bait(clicks: LabeledClickSet, config: BaitConfig) -> LabeledClickSet:
    """Remove the ad network's own bait clicks; attacker copies survive.

    Labeled streams drop exactly the BAIT-labeled clicks. For unlabeled
    data the originals are identified by exact timestamp match against
    the configured injection schedule for target sources.
    """
    if any(c.label is Label.BAIT for c in clicks.clicks):
        kept = tuple(c for c in clicks.clicks if c.label is not Label.BAIT)
    else:
        days = int(np.ceil(clicks.duration_days))
        injected: set[tuple[str, float]] = set()
        for d in range(days):
            day_start = clicks.window_start + d * SECONDS_PER_DAY
            for pattern in config.patterns:
                for t in _daily_times(pattern, day_start, 0.0):
                    for source in config.target_sources:
                        injected.add((source, t))
        kept = tuple(c for c in clicks.clicks
                     if (c.source, c.timestamp) not in injected)
    return LabeledClickSet(kept, dict(clicks.provenance), clicks.window_start,
                           clicks.duration_days)


def fraud_fraction(activation_row: np.ndarray, bait_columns: Sequence[int]) -> float:
    """Share of a row's activation mass on bait columns; 0 when the row is 0."""
    row = np.asarray(activation_row, dtype=float)
    total = float(row.sum())
    if total == 0.0:
        return 0.0
    return float(row[list(bait_columns)].sum()) / total


def _shifted_rows(pattern: BaitPattern, halfwidth: int) -> list[np.ndarray]:
    """The pattern row and its in-range bin shifts, nearest shifts first."""
    bins = np.flatnonzero(pattern.as_row)
    m = pattern.as_row.shape[0]
    rows = []
    for shift in sorted(range(-halfwidth, halfwidth + 1), key=lambda s: (abs(s), s)):
        moved = bins + shift
        if moved[0] < 0 or moved[-1] >= m:
            continue
        row = np.zeros(m)
        row[moved] = 1.0
        rows.append(row)
    return rows


@dataclass
class BaitDetection:
    """Outputs of a frozen-pattern factorization over bait-stripped traffic."""

    factors: MultiLayerFactorization
    folded_matrix: TrafficMatrix
    sources: tuple[str, ...]
    fractions: np.ndarray            # per source, aligned with `sources`
    flagged: tuple[str, ...]
    bait_cells: np.ndarray           # folded rows x bins, flagged sources only
    row_fractions: np.ndarray        # per folded row


def detect_with_bait(
    matrix: TrafficMatrix,
    config: BaitConfig,
    fconfig: FactorizationConfig,
    shift_halfwidth: int = DEFAULT_SHIFT_HALFWIDTH,
) -> BaitDetection:
    """Factorize with frozen bait rows and read fraud fractions off activation.

    The matrix must come from a bait-stripped stream. Multi-day windows
    are folded to one-day rows so every day's injection aligns with the
    same frozen rows. A source's fraud fraction is the share of its
    layer-1 activation (summed over its day rows) on bait-derived
    columns; sources above the flag threshold are marked infected and
    their bait-matching traffic is attributed as spam.
    """
    folded = fold_by_day(matrix)
    days = folded.num_sources // max(1, matrix.num_sources)
    rank = fconfig.resolve_rank(folded.num_sources, folded.bin_config.num_bins)
    frozen: dict[int, np.ndarray] = {}
    for pattern in config.patterns:
        for row in _shifted_rows(pattern, shift_halfwidth):
            if len(frozen) >= rank - 1:
                raise ValueError(
                    f"{len(frozen)} frozen bait rows leave no free rank "
                    f"(rank {rank}); reduce shift_halfwidth or raise rank")
            frozen[len(frozen)] = row
    if not frozen:
        raise ValueError("bait config has no patterns")

    factors = multilayer_factorize(folded.counts, fconfig, frozen_patterns=frozen)
    activation = factors.layers[0].activation
    bait_cols = list(factors.bait_rows)

    row_fractions = np.array([fraud_fraction(row, bait_cols)
                              for row in activation])
    n = matrix.num_sources
    fractions = np.zeros(n)
    for i in range(n):
        block = activation[i * days:(i + 1) * days]
        fractions[i] = fraud_fraction(block.sum(axis=0), bait_cols)
    flagged = tuple(matrix.sources[i] for i in np.flatnonzero(
        fractions > config.flag_threshold))

    bait_cells = activation[:, bait_cols] @ factors.layers[0].patterns[bait_cols]
    flagged_set = set(flagged)
    for i in range(n):
        if matrix.sources[i] not in flagged_set:
            bait_cells[i * days:(i + 1) * days] = 0.0
    return BaitDetection(factors=factors, folded_matrix=folded,
                         sources=tuple(matrix.sources), fractions=fractions,
                         flagged=flagged, bait_cells=bait_cells,
                         row_fractions=row_fractions)


def write_fractions_csv(detection: BaitDetection, path) -> None:
    flagged = set(detection.flagged)
    with open(path, "w", encoding="utf-8") as f:
        f.write("source,fraction,flagged\n")
        for source, fraction in zip(detection.sources, detection.fractions):
            f.write(f"{source},{fraction!r},{int(source in flagged)}\n")


def parse_bait_config(text: str, sources: Sequence[str]) -> BaitConfig:
    """Bait config from key=value lines.

    Keys: delta_seconds (comma-separated), count, targets ("all" or a
    comma-separated source list), flag_threshold, seed. Unknown keys are
    rejected.
    """
    values = {"count": "4", "targets": "all", "seed": "0",
              "flag_threshold": repr(DEFAULT_FLAG_THRESHOLD)}
    known = {"delta_seconds", "count", "targets", "flag_threshold", "seed"}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    if "delta_seconds" not in values:
        raise ValueError("bait config must set delta_seconds")
    deltas = [float(v) for v in values["delta_seconds"].split(",") if v.strip()]
    targets = tuple(sources) if values["targets"] == "all" else \
        tuple(v.strip() for v in values["targets"].split(",") if v.strip())
    return schedule_bait(deltas, int(values["count"]), targets,
                         seed=int(values["seed"]),
                         flag_threshold=float(values["flag_threshold"]))

"""Labeled synthetic clickstreams: legitimate traffic and attack traffic.

Legitimate users click as independent homogeneous Poisson processes.
Attack generators model a click-fraud botnet driven from a command
channel:

* organic replay - the attacker mines a small pool of contiguous click
  segments from real traffic and replays them through every infected
  source, preserving each segment's internal inter-click offsets. A
  replayed segment keeps its original time of day (shifted by whole
  days) plus a bounded per-source dispatch jitter, so copies of one
  segment land near-aligned across infected sources and days.
* inorganic generation - clicks fabricated without a legitimate
  template, either at a constant inter-click offset (synchronized comb
  across the infected set) or at uniformly random times per source.

Every generated click carries its ground-truth label, and every
generator is a pure function of (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .clickstream import ClickEvent, Label, SECONDS_PER_DAY

# Dispatch delay applied when the botnet places a replayed segment.
# Command-and-control broadcasts fire simultaneously across the
# infected set, so the default is exact synchronization; a positive
# value spreads each placement uniformly over +-jitter seconds.
DEFAULT_PLACEMENT_JITTER = 0.0
# Number of mined segments the attacker cycles through; 0 means a fresh
# segment every day (a careful attacker minimizing reuse). A small
# fixed inventory means longer observation windows see each segment
# reused more often.
DEFAULT_POOL_SIZE = 3
# Longest contiguous run mined as a single segment.
MAX_SEGMENT_CLICKS = 16


class AttackKind(Enum):
    REPLAY = "replay"
    RANDOMIZED_REPLAY = "randomized_replay"
    RANDOM_GEN = "random_gen"
    CONSTANT_OFFSET = "constant_offset"


class VolumeClass(Enum):
    """Paper-style attack volume classes, in fake clicks per source per day."""

    STEALTH = "stealth"      # 1-4
    SPARSE = "sparse"        # 5-15
    FIREHOSE = "firehose"    # >15

    @property
    def bounds(self) -> tuple[int, Optional[int]]:
        return {"stealth": (1, 4), "sparse": (5, 15),
                "firehose": (16, None)}[self.value]

    def contains(self, rate: float) -> bool:
        lo, hi = self.bounds
        return rate >= lo and (hi is None or rate <= hi)


@dataclass(frozen=True)
class LegitModel:
    """Parameters of the legitimate traffic pool."""

    per_source_rate: float = 10.0   # mean clicks/day; typical users stay below 15
    num_sources: int = 100
    duration_days: float = 7.0
    seed: int = 0

    def __post_init__(self):
        if self.per_source_rate <= 0:
            raise ValueError("per_source_rate must be positive")
        if self.num_sources < 1:
            raise ValueError("num_sources must be >= 1")
        if self.duration_days <= 0:
            raise ValueError("duration_days must be positive")


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    volume_class: VolumeClass
    spam_per_source_per_day: float
    jitter_scale: float = 0.0       # per-click jitter, RandomizedReplay only
    offset: float = 0.0             # inter-click gap, ConstantOffset only
    infected_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.spam_per_source_per_day <= 0:
            raise ValueError("spam_per_source_per_day must be positive")
        if not self.volume_class.contains(self.spam_per_source_per_day):
            lo, hi = self.volume_class.bounds
            raise ValueError(
                f"rate {self.spam_per_source_per_day} outside "
                f"{self.volume_class.value} range [{lo}, {hi if hi is not None else 'inf'}]")
        if not 0 < self.infected_fraction <= 1:
            raise ValueError("infected_fraction must be in (0, 1]")
        if self.jitter_scale < 0:
            raise ValueError("jitter_scale must be >= 0")
        if self.kind is AttackKind.CONSTANT_OFFSET and self.offset <= 0:
            raise ValueError("ConstantOffset requires offset > 0")


@dataclass(frozen=True)
class LabeledClickSet:
    """Clicks with ground truth plus a replayable provenance record."""

    clicks: tuple[ClickEvent, ...]
    provenance: dict
    window_start: float
    duration_days: float

    def __post_init__(self):
        object.__setattr__(self, "clicks", tuple(self.clicks))
        for c in self.clicks:
            if c.label is Label.UNKNOWN:
                raise ValueError("synthetic clicks must carry a ground-truth label")

    @property
    def window_end(self) -> float:
        return self.window_start + self.duration_days * SECONDS_PER_DAY

    def sources(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for c in self.clicks:
            seen.setdefault(c.source, None)
        return tuple(seen)


def _source_names(n: int) -> list[str]:
    width = max(3, len(str(n - 1)))
    return [f"src{i:0{width}d}" for i in range(n)]


def gen_legitimate(model: LegitModel, window_start: float = 0.0) -> LabeledClickSet:
    """Homogeneous Poisson clicks per source over the window, labeled legit."""
    rng = np.random.default_rng(model.seed)
    span = model.duration_days * SECONDS_PER_DAY
    clicks: list[ClickEvent] = []
    for name in _source_names(model.num_sources):
        count = rng.poisson(model.per_source_rate * model.duration_days)
        times = np.sort(rng.uniform(window_start, window_start + span, size=count))
        clicks.extend(ClickEvent(float(t), name, label=Label.LEGIT) for t in times)
    clicks.sort(key=lambda c: (c.timestamp, c.source))
    provenance = {
        "generator": "legit_poisson",
        "per_source_rate": repr(model.per_source_rate),
        "num_sources": str(model.num_sources),
        "duration_days": repr(model.duration_days),
        "seed": str(model.seed),
        "window_start": repr(window_start),
    }
    return LabeledClickSet(tuple(clicks), provenance, window_start,
                           model.duration_days)


def daily_volume(spec: AttackSpec) -> int:
    """Per-source-per-day spam count: the configured rate, clamped into class."""
    lo, hi = spec.volume_class.bounds
    v = max(int(round(spec.spam_per_source_per_day)), lo)
    return v if hi is None else min(v, hi)


@dataclass(frozen=True)
class _Segment:
    victim: str
    day: int                      # day the run was mined from
    start_tod: float              # seconds into that day of the first click
    offsets: tuple[float, ...]    # inter-click offsets from the first click

    def __len__(self) -> int:
        return len(self.offsets)


def _mine_run(rng: np.random.Generator, legit: LabeledClickSet,
              by_source: dict, eligible: list, max_clicks: int) -> _Segment:
    """One contiguous run from a single day of a random victim's trace."""
    victim = eligible[int(rng.integers(len(eligible)))]
    ts = np.array(sorted(by_source[victim]))
    rel = ts - legit.window_start
    days = (rel // SECONDS_PER_DAY).astype(int)
    # runs stay within one of the victim's days so a day-shifted copy
    # never straddles midnight; prefer busy days and early starts so
    # runs come out long
    uniq, counts = np.unique(days, return_counts=True)
    busy = uniq[counts >= min(8, counts.max())]
    day = int(rng.choice(busy))
    day_ts = ts[days == day]
    start = int(rng.integers(max(1, len(day_ts) - 9)))
    run = day_ts[start:start + max_clicks]
    # keep the longest prefix whose clicks occupy distinct five-minute
    # bins; a run is still contiguous after cutting at a burst
    bins = ((run - legit.window_start) // 300.0).astype(int)
    distinct = np.flatnonzero(np.diff(bins) == 0)
    if len(distinct):
        run = run[:distinct[0] + 1]
    return _Segment(
        victim=victim,
        day=day,
        start_tod=float(run[0] - legit.window_start - day * SECONDS_PER_DAY),
        offsets=tuple(float(t - run[0]) for t in run),
    )


def _mine_day_template(rng: np.random.Generator, legit: LabeledClickSet,
                       by_source: dict, eligible: list,
                       volume: int) -> list[_Segment]:
    """Segments jointly covering exactly `volume` clicks for one replay day."""
    template: list[_Segment] = []
    remaining = volume
    while remaining > 0:
        seg = _mine_run(rng, legit, by_source, eligible,
                        min(remaining, MAX_SEGMENT_CLICKS))
        template.append(seg)
        remaining -= len(seg)
    return template


def place_segment(offsets: Sequence[float], start: float) -> list[float]:
    """Replay timestamps for a segment placed at `start`, offsets preserved."""
    return [start + o for o in offsets]


def gen_organic_replay(
    legit: LabeledClickSet,
    spec: AttackSpec,
    placement_jitter: float = DEFAULT_PLACEMENT_JITTER,
    pool_size: int = DEFAULT_POOL_SIZE,
) -> LabeledClickSet:
    """Replay mined click segments through infected sources.

    The attacker mines `pool_size` day templates, each a set of
    contiguous runs jointly covering the class's daily click volume, and
    cycles through them: on day d every infected source replays template
    d mod pool_size, each run placed at its original time of day shifted
    by whole days plus the dispatch jitter. A small pool means heavy
    reuse; pool_size=0 mines a fresh template every day. Replay keeps
    internal offsets exact; RandomizedReplay adds zero-mean per-click
    jitter of scale `spec.jitter_scale`, clipped to the placement day.
    """
    if spec.kind not in (AttackKind.REPLAY, AttackKind.RANDOMIZED_REPLAY):
        raise ValueError(f"not an organic replay kind: {spec.kind}")
    if not legit.clicks:
        raise ValueError("cannot replay from an empty legitimate click set")
    rng = np.random.default_rng(spec.seed)
    sources = legit.sources()
    infected = _pick_infected(rng, sources, spec.infected_fraction)
    days = int(np.ceil(legit.duration_days))
    if pool_size == 0:
        pool_size = days
    by_source: dict[str, list[float]] = {}
    for c in legit.clicks:
        by_source.setdefault(c.source, []).append(c.timestamp)
    eligible = sorted(s for s, ts in by_source.items() if len(ts) >= 2)
    if not eligible:
        raise ValueError("legitimate input has no source with two or more clicks")
    volume = daily_volume(spec)
    pool = [_mine_day_template(rng, legit, by_source, eligible, volume)
            for _ in range(min(pool_size, days))]
    click_jitter = spec.jitter_scale if spec.kind is AttackKind.RANDOMIZED_REPLAY else 0.0

    clicks: list[ClickEvent] = []
    segments_log: list[str] = []
    for d in range(days):
        day_start = legit.window_start + d * SECONDS_PER_DAY
        day_end = min(day_start + SECONDS_PER_DAY, legit.window_end)
        template = pool[d % len(pool)]
        for source in infected:
            for seg in template:
                base = day_start + seg.start_tod
                span = seg.offsets[-1]
                lo = -min(placement_jitter, seg.start_tod)
                hi = min(placement_jitter,
                         max(0.0, (day_end - base) - span - 1e-6))
                shift = float(rng.uniform(lo, hi)) if hi > lo else lo
                times = place_segment(seg.offsets, base + shift)
                jitters = rng.uniform(-click_jitter, click_jitter,
                                      size=len(seg))
                times = np.clip(np.array(times) + jitters, day_start,
                                day_end - 1e-6)
                clicks.extend(ClickEvent(float(t), source,
                                         label=Label.ORGANIC_SPAM)
                              for t in times)
                segments_log.append(f"{source}:d{d}:{seg.victim}:{len(seg)}")
    clicks.sort(key=lambda c: (c.timestamp, c.source))
    provenance = {
        "generator": "organic_replay",
        "kind": spec.kind.value,
        "volume_class": spec.volume_class.value,
        "spam_per_source_per_day": repr(spec.spam_per_source_per_day),
        "jitter_scale": repr(spec.jitter_scale),
        "infected_fraction": repr(spec.infected_fraction),
        "seed": str(spec.seed),
        "placement_jitter": repr(placement_jitter),
        "pool_size": str(pool_size),
        "infected": ",".join(infected),
        "segments": ";".join(segments_log),
        "window_start": repr(legit.window_start),
        "duration_days": repr(legit.duration_days),
    }
    return LabeledClickSet(tuple(clicks), provenance, legit.window_start,
                           legit.duration_days)


def _pick_infected(rng: np.random.Generator, sources: Sequence[str],
                   fraction: float) -> list[str]:
    ordered = sorted(sources)
    k = max(1, int(round(fraction * len(ordered))))
    idx = rng.choice(len(ordered), size=min(k, len(ordered)), replace=False)
    return [ordered[i] for i in sorted(idx)]


def gen_inorganic(
    spec: AttackSpec,
    sources: Sequence[str],
    duration_days: float,
    window_start: float = 0.0,
) -> LabeledClickSet:
    """Fabricated clickspam with no legitimate template.

    ConstantOffset emits a fixed-gap comb, one campaign start per day
    shared by every infected source; RandomGen emits per-source clicks
    at uniformly random times. Both meet the class's daily volume.
    """
    if spec.kind not in (AttackKind.RANDOM_GEN, AttackKind.CONSTANT_OFFSET):
        raise ValueError(f"not an inorganic kind: {spec.kind}")
    rng = np.random.default_rng(spec.seed)
    infected = _pick_infected(rng, sources, spec.infected_fraction)
    days = int(np.ceil(duration_days))
    window_end = window_start + duration_days * SECONDS_PER_DAY

    lo_class, _ = spec.volume_class.bounds
    if spec.kind is AttackKind.CONSTANT_OFFSET:
        max_fit = int(SECONDS_PER_DAY // spec.offset)
        if max_fit < lo_class:
            raise ValueError(
                f"offset {spec.offset}s cannot fit {lo_class} clicks in a day")

    clicks: list[ClickEvent] = []
    for d in range(days):
        day_start = window_start + d * SECONDS_PER_DAY
        day_end = min(day_start + SECONDS_PER_DAY, window_end)
        if spec.kind is AttackKind.CONSTANT_OFFSET:
            comb_len = min(daily_volume(spec), int(SECONDS_PER_DAY // spec.offset))
            latest = day_end - day_start - (comb_len - 1) * spec.offset - 1e-6
            start_tod = float(rng.uniform(0.0, max(latest, 1e-6)))
            for source in infected:
                for k in range(comb_len):
                    t = day_start + start_tod + k * spec.offset
                    if t < day_end:
                        clicks.append(ClickEvent(t, source,
                                                 label=Label.INORGANIC_SPAM))
        else:
            for source in infected:
                times = rng.uniform(day_start, day_end, size=daily_volume(spec))
                clicks.extend(ClickEvent(float(t), source,
                                         label=Label.INORGANIC_SPAM)
                              for t in times)
    clicks.sort(key=lambda c: (c.timestamp, c.source))
    provenance = {
        "generator": "inorganic",
        "kind": spec.kind.value,
        "volume_class": spec.volume_class.value,
        "spam_per_source_per_day": repr(spec.spam_per_source_per_day),
        "offset": repr(spec.offset),
        "infected_fraction": repr(spec.infected_fraction),
        "seed": str(spec.seed),
        "infected": ",".join(infected),
        "window_start": repr(window_start),
        "duration_days": repr(duration_days),
    }
    return LabeledClickSet(tuple(clicks), provenance, window_start, duration_days)


def superimpose(a: LabeledClickSet, b: LabeledClickSet) -> LabeledClickSet:
    """Timestamp-sorted union; no deduplication, labels preserved."""
    merged = sorted(a.clicks + b.clicks, key=lambda c: (c.timestamp, c.source))
    provenance = {f"left.{k}": v for k, v in a.provenance.items()}
    provenance.update({f"right.{k}": v for k, v in b.provenance.items()})
    start = min(a.window_start, b.window_start)
    end = max(a.window_end, b.window_end)
    return LabeledClickSet(tuple(merged), provenance, start,
                           (end - start) / SECONDS_PER_DAY)


def write_provenance(provenance: dict, path) -> None:
    """Sidecar metadata, one key=value per line, keys sorted."""
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(provenance):
            f.write(f"{key}={provenance[key]}\n")

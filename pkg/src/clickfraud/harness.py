"""Experiment orchestration: end-to-end runs, rates, and report tables.

A run synthesizes labeled traffic, optionally injects bait, builds the
traffic matrix, factorizes, isolates clickspam and scores the per-click
verdicts against ground truth. Detection quality is reported as the
false-positive rate (fraction of legitimate clicks reported fraudulent)
and true-positive rate (fraction of fraudulent clicks detected),
aggregated over repetitions per attack class.

Inference always works on the day-folded matrix (one row per source per
day) so that timing patterns reused across days or sources repeat
across rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .bait import (BaitConfig, BaitDetection, detect_with_bait, inject_bait,
                   schedule_bait, strip_bait, write_fractions_csv,
                   DEFAULT_SHIFT_HALFWIDTH)
from .clickstream import (ClickEvent, Label, ParsedClickstream, TimeBinConfig,
                          TrafficMatrix, bin_index, build_traffic_matrix,
                          fold_by_day, read_clickstream)
from .isolation import (ClickVerdicts, PatternCluster, classify_clusters,
                        cluster_patterns, isolate_organic, verdict_clicks,
                        write_cluster_summary, write_verdicts_csv)
from .nmf import (FactorizationConfig, MultiLayerFactorization,
                  multilayer_factorize, save_factors)
from .synth import (AttackKind, AttackSpec, LabeledClickSet, LegitModel,
                    VolumeClass, gen_inorganic, gen_legitimate,
                    gen_organic_replay, superimpose,
                    DEFAULT_PLACEMENT_JITTER, DEFAULT_POOL_SIZE)


class UsageError(Exception):
    """Bad arguments or config keys; maps to exit code 1."""


class DataError(Exception):
    """Unreadable or malformed input data; maps to exit code 2."""


# --- detection rates ----------------------------------------------------------


@dataclass
class DetectionReport:
    """FPR/TPR with per-class breakdown and run metadata."""

    fpr: float
    tpr: float
    organic_tpr: float
    inorganic_tpr: float
    n_legit: int
    n_spam: int
    false_positives: int
    true_positives: int
    warnings: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)


def compute_rates(truth: Sequence[Label], predicted: Sequence[bool],
                  metadata: Optional[dict] = None) -> DetectionReport:
    """Score per-click predictions against ground truth.

    Bait clicks count toward neither numerator nor denominator. A zero
    denominator yields rate 0 with a warning flag rather than an error.
    """
    if len(truth) != len(predicted):
        raise ValueError(f"length mismatch: {len(truth)} truth labels vs "
                         f"{len(predicted)} predictions")
    warnings: list[str] = []

    def rate(hits: int, total: int, name: str) -> float:
        if total == 0:
            warnings.append(f"no {name} clicks; rate reported as 0")
            return 0.0
        return hits / total

    n_legit = n_spam = n_org = n_inorg = 0
    fp = tp = tp_org = tp_inorg = 0
    for label, spam in zip(truth, predicted):
        if label is Label.BAIT or label is Label.UNKNOWN:
            continue
        if label is Label.LEGIT:
            n_legit += 1
            fp += bool(spam)
        else:
            n_spam += 1
            tp += bool(spam)
            if label is Label.ORGANIC_SPAM:
                n_org += 1
                tp_org += bool(spam)
            else:
                n_inorg += 1
                tp_inorg += bool(spam)
    return DetectionReport(
        fpr=rate(fp, n_legit, "legitimate"),
        tpr=rate(tp, n_spam, "spam"),
        organic_tpr=rate(tp_org, n_org, "organic-spam") if n_org else 0.0,
        inorganic_tpr=rate(tp_inorg, n_inorg, "inorganic-spam") if n_inorg else 0.0,
        n_legit=n_legit, n_spam=n_spam,
        false_positives=fp, true_positives=tp,
        warnings=tuple(warnings), metadata=dict(metadata or {}),
    )


# --- pipelines ----------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Detection-side knobs shared by the passive and active pipelines.

    A pattern's total activation picks up incidental traffic that sits
    in its bins by chance, proportional to the ambient level (total
    clicks / bins): one ambient unit in expectation and up to about 1.8
    ambient units for one-off patterns. With `ambient_adjusted` on, the
    repeat threshold and the inorganic weight gate are therefore applied
    on top of `ambient_factor` * ambient, so only activation clearly in
    excess of chance counts as repetition at any traffic scale.
    """

    factorization: FactorizationConfig = FactorizationConfig(
        num_layers=1, max_iters=200)
    repeat_threshold: float = 2.0
    similarity_threshold: float = 0.9
    entropy_threshold: float = 0.5
    min_inorganic_weight: float = 2.0
    ambient_adjusted: bool = True
    ambient_factor: float = 2.0
    source_flag_threshold: Optional[float] = 0.05
    min_active_days: int = 3
    bait_shift_halfwidth: int = DEFAULT_SHIFT_HALFWIDTH


@dataclass
class PipelineResult:
    matrix: TrafficMatrix            # as built, one row per source
    folded: TrafficMatrix            # as factorized, one row per source-day
    factors: MultiLayerFactorization
    clusters: list[PatternCluster]
    verdicts: ClickVerdicts
    discarded: int
    bait_detection: Optional[BaitDetection] = None

    @property
    def converged(self) -> bool:
        return self.factors.all_converged


def _folded_locator(matrix: TrafficMatrix, folded: TrafficMatrix):
    row_of = {s: i for i, s in enumerate(matrix.sources)}
    per_day = folded.bin_config.num_bins
    days = folded.num_sources // max(1, matrix.num_sources)

    def locate(click: ClickEvent) -> Optional[tuple[int, int]]:
        i = row_of.get(click.source)
        j = bin_index(click.timestamp, matrix.bin_config)
        if i is None or j is None:
            return None
        return i * days + j // per_day, j % per_day

    return locate


def _bin_config_for(clicks_window_start: float, duration_days: float) -> TimeBinConfig:
    return TimeBinConfig.for_days(int(math.ceil(duration_days)),
                                  window_start=clicks_window_start)


def run_passive_pipeline(
    clicks: Sequence[ClickEvent],
    bins: TimeBinConfig,
    config: PipelineConfig,
) -> PipelineResult:
    """Mimicry detection: factorize, isolate reuse, cluster and score cells."""
    matrix, discarded = build_traffic_matrix(clicks, bins)
    folded = fold_by_day(matrix)
    factors = multilayer_factorize(folded.counts, config.factorization)
    return _finish_pipeline(clicks, matrix, folded, factors, config,
                            discarded, bait_detection=None)


def run_bait_pipeline(
    clicks: Sequence[ClickEvent],
    bins: TimeBinConfig,
    bait_config: BaitConfig,
    config: PipelineConfig,
) -> PipelineResult:
    """Active detection over a bait-stripped stream with frozen bait rows."""
    matrix, discarded = build_traffic_matrix(clicks, bins)
    detection = detect_with_bait(matrix, bait_config, config.factorization,
                                 shift_halfwidth=config.bait_shift_halfwidth)
    return _finish_pipeline(clicks, matrix, detection.folded_matrix,
                            detection.factors, config, discarded,
                            bait_detection=detection)


def _finish_pipeline(clicks, matrix, folded, factors, config, discarded,
                     bait_detection) -> PipelineResult:
    noise_floor = 0.0
    if config.ambient_adjusted:
        ambient = folded.counts.sum() / folded.bin_config.num_bins
        noise_floor = config.ambient_factor * ambient
    organic = isolate_organic(factors, config.repeat_threshold + noise_floor,
                              allow_nonconverged=True)
    raw_clusters, _dropped = cluster_patterns(factors.final_patterns,
                                              config.similarity_threshold)
    clusters = classify_clusters(raw_clusters, factors,
                                 config.entropy_threshold,
                                 folded.bin_config.bin_width)
    extra = bait_detection.bait_cells if bait_detection is not None else None
    days = folded.num_sources // max(1, matrix.num_sources)
    row_groups = np.repeat(np.arange(matrix.num_sources), days)
    verdicts = verdict_clicks(organic, clusters, factors, folded, clicks,
                              locate=_folded_locator(matrix, folded),
                              extra_spam_cells=extra,
                              min_inorganic_weight=config.min_inorganic_weight
                              + noise_floor,
                              row_groups=row_groups,
                              source_flag_threshold=config.source_flag_threshold,
                              min_active_rows=min(config.min_active_days, days))
    return PipelineResult(matrix=matrix, folded=folded, factors=factors,
                          clusters=clusters, verdicts=verdicts,
                          discarded=discarded, bait_detection=bait_detection)


# --- experiment configuration --------------------------------------------------

_CLASS_RATE_DEFAULTS = {"stealth": 2.0, "sparse": 10.0, "firehose": 25.0}


@dataclass(frozen=True)
class ExperimentConfig:
    """A full sweep: traffic model, attacks, defence, inference and seeds."""

    num_sources: int = 100
    legit_rate_per_day: float = 10.0
    duration_days: float = 7.0
    window_start: float = 0.0
    defence: str = "passive"                       # "passive" | "bait"
    attack_classes: tuple[str, ...] = ("stealth", "sparse", "firehose")
    attack_kind: AttackKind = AttackKind.REPLAY
    class_rates: dict = field(default_factory=dict)
    infected_fraction: float = 0.2
    jitter_scale: float = 60.0
    offset: float = 600.0
    placement_jitter: float = DEFAULT_PLACEMENT_JITTER
    # Mined day-template inventory per class: a careful low-rate
    # attacker rotates a larger inventory, volume attackers recycle a
    # handful of templates; reuse per template grows with the window.
    class_pool_sizes: dict = field(default_factory=lambda: {
        "stealth": 7, "sparse": 3, "firehose": 1})
    repetitions: int = 10
    base_seed: int = 0
    pipeline: PipelineConfig = PipelineConfig()
    bait_deltas: tuple[float, ...] = (600.0, 900.0)
    bait_count: int = 4
    bait_flag_threshold: float = 0.05
    bait_seed: int = 77

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.defence not in ("passive", "bait"):
            raise ValueError(f"unknown defence {self.defence!r}")
        if self.defence == "bait" and not self.bait_deltas:
            raise ValueError("bait defence requires at least one bait delta")
        for name in self.attack_classes:
            if name not in _CLASS_RATE_DEFAULTS:
                raise ValueError(f"unknown attack class {name!r}")

    def rate_for(self, class_name: str) -> float:
        return float(self.class_rates.get(class_name,
                                          _CLASS_RATE_DEFAULTS[class_name]))

    def attack_spec(self, class_name: str, seed: int) -> AttackSpec:
        return AttackSpec(
            kind=self.attack_kind,
            volume_class=VolumeClass(class_name),
            spam_per_source_per_day=self.rate_for(class_name),
            jitter_scale=self.jitter_scale,
            offset=self.offset,
            infected_fraction=self.infected_fraction,
            seed=seed,
        )


def _legit_seed(base: int, rep: int) -> int:
    return base + 1000 * rep


def _attack_seed(base: int, rep: int, attack_index: int) -> int:
    return base + 1000 * rep + 101 + 13 * attack_index


def _bait_seed(config: ExperimentConfig, rep: int) -> int:
    return config.bait_seed + 1000 * rep


@dataclass
class RunOutcome:
    attack_class: str
    repetition: int
    report: Optional[DetectionReport]
    error: Optional[str] = None


def run_single(config: ExperimentConfig, class_name: Optional[str],
               rep: int) -> tuple[DetectionReport, PipelineResult, LabeledClickSet]:
    """One synthesize-detect-score run; class_name None means no attack."""
    attack_index = (list(config.attack_classes).index(class_name)
                    if class_name else 0)
    model = LegitModel(per_source_rate=config.legit_rate_per_day,
                       num_sources=config.num_sources,
                       duration_days=config.duration_days,
                       seed=_legit_seed(config.base_seed, rep))
    legit = gen_legitimate(model, config.window_start)
    bins = _bin_config_for(config.window_start, config.duration_days)

    bait_config = None
    base_stream = legit
    if config.defence == "bait":
        bait_config = schedule_bait(config.bait_deltas, config.bait_count,
                                    targets=legit.sources(),
                                    seed=_bait_seed(config, rep),
                                    flag_threshold=config.bait_flag_threshold)
        base_stream = inject_bait(legit, bait_config)

    if class_name is None:
        stream = base_stream
    else:
        spec = config.attack_spec(class_name,
                                  _attack_seed(config.base_seed, rep, attack_index))
        if spec.kind in (AttackKind.REPLAY, AttackKind.RANDOMIZED_REPLAY):
            pool = config.class_pool_sizes.get(class_name, DEFAULT_POOL_SIZE)
            spam = gen_organic_replay(base_stream, spec,
                                      placement_jitter=config.placement_jitter,
                                      pool_size=pool)
        else:
            spam = gen_inorganic(spec, legit.sources(), config.duration_days,
                                 config.window_start)
        stream = superimpose(base_stream, spam)

    if config.defence == "bait":
        observed = strip_bait(stream, bait_config)
        result = run_bait_pipeline(observed.clicks, bins, bait_config,
                                   config.pipeline)
        scored = observed
    else:
        observed = stream
        result = run_passive_pipeline(observed.clicks, bins, config.pipeline)
        scored = observed

    truth = [c.label for c in scored.clicks]
    metadata = {
        "attack_class": class_name or "none",
        "defence": config.defence,
        "duration_days": config.duration_days,
        "repetition": rep,
        "legit_seed": _legit_seed(config.base_seed, rep),
        "converged": result.converged,
        "discarded": result.discarded,
    }
    report = compute_rates(truth, result.verdicts.predicted_spam, metadata)
    return report, result, scored


@dataclass
class ScenarioSummary:
    attack_class: str
    defence: str
    duration_days: float
    repetitions: int
    tpr_mean: float
    tpr_std: float
    fpr_mean: float
    fpr_std: float
    organic_tpr_mean: float
    inorganic_tpr_mean: float
    converged_fraction: float
    failures: int
    outcomes: list[RunOutcome] = field(default_factory=list)


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    arr = np.asarray(values, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), std


def run_experiment(config: ExperimentConfig,
                   out_dir: Optional[Path] = None) -> list[ScenarioSummary]:
    """Full sweep over attack classes and repetitions.

    A failing repetition is recorded and the sweep continues. When
    `out_dir` is given the aggregate table is written as report.csv and
    report.txt, deterministically for a fixed config.
    """
    scenarios: list[Optional[str]] = list(config.attack_classes) or [None]
    summaries: list[ScenarioSummary] = []
    for class_name in scenarios:
        outcomes: list[RunOutcome] = []
        for rep in range(config.repetitions):
            try:
                report, _result, _stream = run_single(config, class_name, rep)
                outcomes.append(RunOutcome(class_name or "none", rep, report))
            except Exception as exc:  # recorded, sweep continues
                outcomes.append(RunOutcome(class_name or "none", rep, None,
                                           error=f"{type(exc).__name__}: {exc}"))
        good = [o.report for o in outcomes if o.report is not None]
        tpr_mean, tpr_std = _mean_std([r.tpr for r in good])
        fpr_mean, fpr_std = _mean_std([r.fpr for r in good])
        org_mean, _ = _mean_std([r.organic_tpr for r in good])
        inorg_mean, _ = _mean_std([r.inorganic_tpr for r in good])
        conv = [1.0 if r.metadata.get("converged") else 0.0 for r in good]
        summaries.append(ScenarioSummary(
            attack_class=class_name or "none",
            defence=config.defence,
            duration_days=config.duration_days,
            repetitions=config.repetitions,
            tpr_mean=tpr_mean, tpr_std=tpr_std,
            fpr_mean=fpr_mean, fpr_std=fpr_std,
            organic_tpr_mean=org_mean, inorganic_tpr_mean=inorg_mean,
            converged_fraction=float(np.mean(conv)) if conv else 0.0,
            failures=sum(1 for o in outcomes if o.report is None),
            outcomes=outcomes,
        ))
    if out_dir is not None:
        write_experiment_report(summaries, config, Path(out_dir))
    return summaries


def write_experiment_report(summaries: list[ScenarioSummary],
                            config: ExperimentConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    has_attack = any(s.attack_class != "none" for s in summaries)
    with open(out_dir / "report.csv", "w", encoding="utf-8") as f:
        cols = ["attack_class", "defence", "duration_days", "repetitions",
                "fpr_mean", "fpr_std"]
        if has_attack:
            cols += ["tpr_mean", "tpr_std", "organic_tpr_mean",
                     "inorganic_tpr_mean"]
        cols += ["converged_fraction", "failures"]
        f.write(",".join(cols) + "\n")
        for s in summaries:
            row = [s.attack_class, s.defence, repr(s.duration_days),
                   str(s.repetitions), repr(s.fpr_mean), repr(s.fpr_std)]
            if has_attack:
                row += [repr(s.tpr_mean), repr(s.tpr_std),
                        repr(s.organic_tpr_mean), repr(s.inorganic_tpr_mean)]
            row += [repr(s.converged_fraction), str(s.failures)]
            f.write(",".join(row) + "\n")
    with open(out_dir / "report.txt", "w", encoding="utf-8") as f:
        f.write(f"defence={config.defence} duration={config.duration_days:g}d "
                f"sources={config.num_sources} reps={config.repetitions} "
                f"seed={config.base_seed}\n")
        header = f"{'class':<10} {'%FPR':>8} {'+-':>7}"
        if has_attack:
            header += f" {'%TPR':>8} {'+-':>7}"
        header += f" {'conv':>5} {'fail':>4}"
        f.write(header + "\n")
        for s in summaries:
            line = (f"{s.attack_class:<10} {100 * s.fpr_mean:>8.3f} "
                    f"{100 * s.fpr_std:>7.3f}")
            if has_attack:
                line += f" {100 * s.tpr_mean:>8.2f} {100 * s.tpr_std:>7.2f}"
            line += f" {s.converged_fraction:>5.2f} {s.failures:>4d}"
            f.write(line + "\n")


# --- ingestion and config files -------------------------------------------------


def ingest_clickstream(path) -> ParsedClickstream:
    """Read a clickstream file; fatal problems raise DataError."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    try:
        return read_clickstream(p)
    except Exception as exc:
        raise DataError(f"{p}: {exc}") from exc


def parse_keyvalue(text: str, known: dict[str, str]) -> dict[str, str]:
    """key=value config lines over a dict of known keys and defaults."""
    values = dict(known)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise UsageError(f"line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


FACTOR_CONFIG_DEFAULTS = {
    "num_layers": "1",
    "rank": "auto",
    "rank_cap": "128",
    "epsilon": "0.05",
    "pool_halfwidth": "12",
    "max_iters": "200",
    "seed": "0",
    "repeat_threshold": "2.0",
    "similarity_threshold": "0.9",
    "entropy_threshold": "0.5",
    "min_inorganic_weight": "2.0",
    "ambient_adjusted": "1",
    "ambient_factor": "2.0",
    "source_flag_threshold": "0.05",
    "min_active_days": "3",
    "bait_shift_halfwidth": str(DEFAULT_SHIFT_HALFWIDTH),
}


def parse_pipeline_config(text: str) -> PipelineConfig:
    v = parse_keyvalue(text, FACTOR_CONFIG_DEFAULTS)
    try:
        rank = None if v["rank"] in ("auto", "") else int(v["rank"])
        fconfig = FactorizationConfig(
            num_layers=int(v["num_layers"]), rank=rank,
            rank_cap=int(v["rank_cap"]), epsilon=float(v["epsilon"]),
            pool_halfwidth=int(v["pool_halfwidth"]),
            max_iters=int(v["max_iters"]), seed=int(v["seed"]))
        return PipelineConfig(
            factorization=fconfig,
            repeat_threshold=float(v["repeat_threshold"]),
            similarity_threshold=float(v["similarity_threshold"]),
            entropy_threshold=float(v["entropy_threshold"]),
            min_inorganic_weight=float(v["min_inorganic_weight"]),
            ambient_adjusted=v["ambient_adjusted"] not in ("0", "false", ""),
            ambient_factor=float(v["ambient_factor"]),
            source_flag_threshold=None if v["source_flag_threshold"]
            in ("", "off") else float(v["source_flag_threshold"]),
            min_active_days=int(v["min_active_days"]),
            bait_shift_halfwidth=int(v["bait_shift_halfwidth"]))
    except ValueError as exc:
        raise UsageError(f"bad factor config value: {exc}") from exc


EXPERIMENT_CONFIG_DEFAULTS = {
    "num_sources": "100",
    "legit_rate_per_day": "10.0",
    "duration_days": "7",
    "window_start": "0.0",
    "defence": "passive",
    "attack_classes": "stealth,sparse,firehose",
    "attack_kind": "replay",
    "stealth_rate": "2.0",
    "sparse_rate": "10.0",
    "firehose_rate": "25.0",
    "infected_fraction": "0.2",
    "jitter_scale": "60.0",
    "offset": "600.0",
    "placement_jitter": str(DEFAULT_PLACEMENT_JITTER),
    "stealth_pool": "7",
    "sparse_pool": "3",
    "firehose_pool": "1",
    "repetitions": "10",
    "base_seed": "0",
    "bait_deltas": "600,900",
    "bait_count": "4",
    "bait_flag_threshold": "0.05",
    "bait_seed": "77",
    **FACTOR_CONFIG_DEFAULTS,
}


def parse_experiment_config(text: str) -> ExperimentConfig:
    v = parse_keyvalue(text, EXPERIMENT_CONFIG_DEFAULTS)
    pipeline_lines = "\n".join(f"{k}={v[k]}" for k in FACTOR_CONFIG_DEFAULTS)
    pipeline = parse_pipeline_config(pipeline_lines)
    classes = tuple(c.strip() for c in v["attack_classes"].split(",")
                    if c.strip() and c.strip() != "none")
    try:
        return ExperimentConfig(
            num_sources=int(v["num_sources"]),
            legit_rate_per_day=float(v["legit_rate_per_day"]),
            duration_days=float(v["duration_days"]),
            window_start=float(v["window_start"]),
            defence=v["defence"],
            attack_classes=classes,
            attack_kind=AttackKind(v["attack_kind"]),
            class_rates={"stealth": float(v["stealth_rate"]),
                         "sparse": float(v["sparse_rate"]),
                         "firehose": float(v["firehose_rate"])},
            infected_fraction=float(v["infected_fraction"]),
            jitter_scale=float(v["jitter_scale"]),
            offset=float(v["offset"]),
            placement_jitter=float(v["placement_jitter"]),
            class_pool_sizes={"stealth": int(v["stealth_pool"]),
                              "sparse": int(v["sparse_pool"]),
                              "firehose": int(v["firehose_pool"])},
            repetitions=int(v["repetitions"]),
            base_seed=int(v["base_seed"]),
            pipeline=pipeline,
            bait_deltas=tuple(float(d) for d in v["bait_deltas"].split(",")
                              if d.strip()),
            bait_count=int(v["bait_count"]),
            bait_flag_threshold=float(v["bait_flag_threshold"]),
            bait_seed=int(v["bait_seed"]),
        )
    except ValueError as exc:
        raise UsageError(f"bad experiment config value: {exc}") from exc

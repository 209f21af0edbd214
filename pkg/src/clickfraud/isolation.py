"""Turning a factorization into clickspam verdicts.

Organic clickspam is traffic whose timing pattern repeats: a pattern's
total activation (the column sum of the effective activation matrix)
counts how often it occurs across sources, and patterns above the
repeat threshold are retained as fraud. Inorganic clickspam is found by
grouping patterns into cosine-similarity clusters and testing the
normalized Shannon entropy of their inter-click gap distributions:
machine-generated combs have near-constant gaps and land at low
entropy, while genuine user activity stays high.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .clickstream import ClickEvent, Label, TrafficMatrix, bin_index
from .nmf import MultiLayerFactorization


@dataclass
class OrganicReport:
    """Estimated organic-fraud clicks per cell and the patterns behind them."""

    spam_counts: np.ndarray                     # n x m, real-valued estimates
    reused_pattern_indices: tuple[int, ...]
    per_pattern_total_activation: np.ndarray


def isolate_organic(
    factors: MultiLayerFactorization,
    repeat_threshold: float = 2.0,
    allow_nonconverged: bool = False,
    min_pattern_bins: int = 1,
) -> OrganicReport:
    """Retain patterns whose total activation exceeds the repeat threshold.

    Patterns at or below the threshold are zeroed in both factors; the
    product of what remains estimates fake clicks per cell. Strictly
    more than `repeat_threshold` occurrences counts as reuse.
    `min_pattern_bins` optionally drops rows with fewer occupied bins
    than a timing sequence needs.
    """
    if not factors.all_converged and not allow_nonconverged:
        raise ValueError("factorization did not converge; "
                         "pass allow_nonconverged=True to proceed anyway")
    activation = factors.effective_activation
    patterns = factors.final_patterns
    totals = activation.sum(axis=0)
    has_timing = np.array([len(occupied_bins(row)) >= min_pattern_bins
                           for row in patterns])
    reused = np.flatnonzero((totals > repeat_threshold) & has_timing)
    if len(reused):
        spam = activation[:, reused] @ patterns[reused]
    else:
        spam = np.zeros((activation.shape[0], patterns.shape[1]))
    return OrganicReport(spam_counts=spam,
                         reused_pattern_indices=tuple(int(i) for i in reused),
                         per_pattern_total_activation=totals)


@dataclass
class PatternCluster:
    """A group of similar timing patterns and its fraud verdict."""

    member_indices: tuple[int, ...]
    centroid: np.ndarray
    total_weight: float = 0.0
    normalized_entropy: float = float("nan")
    verdict: Optional[Label] = None


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def cluster_patterns(
    patterns: np.ndarray,
    similarity_threshold: float = 0.9,
) -> tuple[list[PatternCluster], tuple[int, ...]]:
    """Greedy centroid clustering under cosine similarity.

    Patterns are visited in row order; each joins the existing cluster
    whose centroid is most similar, provided the similarity meets the
    threshold, and otherwise seeds a new cluster. One refinement pass
    re-assigns every pattern against the first pass's centroids (again
    threshold-gated, keeping its cluster when nothing qualifies), then
    centroids are recomputed as member means. All-zero rows cannot be
    compared by cosine; they are dropped and reported separately.
    """
    patterns = np.asarray(patterns, dtype=float)
    norms = np.linalg.norm(patterns, axis=1)
    dropped = tuple(int(i) for i in np.flatnonzero(norms == 0))
    live = [i for i in range(patterns.shape[0]) if norms[i] > 0]

    members: list[list[int]] = []
    centroids: list[np.ndarray] = []
    for i in live:
        row = patterns[i]
        best, best_sim = -1, -np.inf
        for c, centroid in enumerate(centroids):
            sim = _cosine(row, centroid)
            if sim > best_sim:
                best, best_sim = c, sim
        if best >= 0 and best_sim >= similarity_threshold:
            members[best].append(i)
            centroids[best] = patterns[members[best]].mean(axis=0)
        else:
            members.append([i])
            centroids.append(row.astype(float).copy())

    frozen = [c.copy() for c in centroids]
    assignment: dict[int, int] = {}
    for c, group in enumerate(members):
        for i in group:
            assignment[i] = c
    for i in live:
        row = patterns[i]
        best, best_sim = -1, -np.inf
        for c, centroid in enumerate(frozen):
            sim = _cosine(row, centroid)
            if sim > best_sim:
                best, best_sim = c, sim
        if best >= 0 and best_sim >= similarity_threshold:
            assignment[i] = best

    regrouped: list[list[int]] = [[] for _ in frozen]
    for i in live:
        regrouped[assignment[i]].append(i)
    clusters = [
        PatternCluster(member_indices=tuple(group),
                       centroid=patterns[group].mean(axis=0))
        for group in regrouped if group
    ]
    return clusters, dropped


# Cells below this fraction of a pattern row's peak hold no clicks.
# Multiplicative updates decay unused entries geometrically but never
# reach exact zero, so occupancy needs a relative floor; relative keeps
# entropy invariant under positive rescaling of the row.
CELL_FLOOR = 0.05


def occupied_bins(pattern: np.ndarray, floor: float = CELL_FLOOR) -> np.ndarray:
    """Indices of cells carrying click mass: above `floor` of the row peak."""
    pattern = np.asarray(pattern, dtype=float)
    peak = pattern.max() if pattern.size else 0.0
    if peak <= 0:
        return np.zeros(0, dtype=np.int64)
    return np.flatnonzero(pattern > floor * peak)


def pattern_entropy(pattern: np.ndarray, bin_width: float) -> float:
    """Normalized Shannon entropy of a pattern's inter-click gaps, in [0, 1].

    Click times are reconstructed at bin centers with multiplicities
    from the rounded cell values (minimum one per occupied cell; see
    `occupied_bins`). Gaps between simultaneous repeats within one bin
    carry no timing information and are excluded; the entropy of the
    empirical distribution over the remaining distinct gap values is
    normalized by log2 of the number of distinct values. Patterns with
    fewer than two occupied bins, or a single distinct gap, score
    exactly 0; equal-frequency distinct gaps score exactly 1.
    """
    pattern = np.asarray(pattern, dtype=float)
    nonzero = occupied_bins(pattern)
    if len(nonzero) < 2:
        return 0.0
    multiplicity = np.maximum(1, np.rint(pattern[nonzero]).astype(np.int64))
    centers = (nonzero + 0.5) * bin_width
    times = np.repeat(centers, multiplicity)
    gaps = np.diff(times)
    gaps = gaps[gaps > 0]
    if len(gaps) == 0:
        return 0.0
    _, freq = np.unique(gaps, return_counts=True)
    if len(freq) < 2:
        return 0.0
    total = int(freq.sum())
    entropy = math.log2(total) - float(freq @ np.log2(freq)) / total
    return entropy / math.log2(len(freq))


def classify_clusters(
    clusters: Sequence[PatternCluster],
    factors: MultiLayerFactorization,
    entropy_threshold: float = 0.5,
    bin_width: float = 300.0,
) -> list[PatternCluster]:
    """Complete clusters with entropy, weight and verdict.

    A cluster's entropy is the unweighted mean of its member patterns'
    entropies; at or below the threshold the cluster is judged
    inorganic clickspam (the boundary value is spam).
    """
    totals = factors.effective_activation.sum(axis=0)
    patterns = factors.final_patterns
    out: list[PatternCluster] = []
    for cluster in clusters:
        idx = list(cluster.member_indices)
        entropy = float(np.mean([pattern_entropy(patterns[i], bin_width)
                                 for i in idx]))
        verdict = Label.INORGANIC_SPAM if entropy <= entropy_threshold \
            else Label.LEGIT
        out.append(PatternCluster(
            member_indices=cluster.member_indices,
            centroid=cluster.centroid,
            total_weight=float(totals[idx].sum()),
            normalized_entropy=entropy,
            verdict=verdict,
        ))
    return out


@dataclass
class ClickVerdicts:
    """Per-cell spam estimates and the per-click spam flags they imply."""

    cell_spam: np.ndarray          # clamped to observed counts
    organic_cells: np.ndarray      # raw organic contribution
    inorganic_cells: np.ndarray    # raw inorganic-cluster contribution
    predicted_spam: np.ndarray     # bool, aligned with the click sequence


def verdict_clicks(
    report: OrganicReport,
    clusters: Sequence[PatternCluster],
    factors: MultiLayerFactorization,
    matrix: TrafficMatrix,
    clicks: Sequence[ClickEvent],
    locate=None,
    extra_spam_cells: Optional[np.ndarray] = None,
    min_inorganic_weight: float = 2.0,
    row_groups: Optional[np.ndarray] = None,
    source_flag_threshold: Optional[float] = 0.05,
    min_active_rows: int = 1,
) -> ClickVerdicts:
    """Join isolation outputs back to individual clicks.

    A cell's predicted spam is the organic estimate plus the
    reconstruction of inorganic-verdict clusters (plus any
    `extra_spam_cells`, e.g. the bait defence's attribution), clamped to
    the cell's observed count. Inorganic verdicts are attributed by
    weight as well as entropy: a low-entropy cluster whose total
    activation never exceeds `min_inorganic_weight` is a one-off, not an
    attack, and contributes nothing.

    Spam is then attributed per source, not per stray coincidence: rows
    are grouped by `row_groups` (default: each row its own group) and a
    group keeps its spam cells only when (a) its predicted spam share of
    observed traffic exceeds `source_flag_threshold` plus the coverage
    baseline (the fraction of time-bin columns carrying spam mass), and
    (b) at least `min_active_rows` of its rows carry spam mass. An
    uninvolved source's clicks land on flagged columns at the baseline
    rate by chance alone, and the user a segment was stolen from matches
    it only in the window it was mined from, while an infected source
    both exceeds the baseline and recurs day after day.
    source_flag_threshold=None disables the gate.

    Within a cell the rounded spam count is attributed to the earliest
    clicks first. `locate` maps a click to its (row, column) in `matrix`
    and defaults to source/bin lookup; clicks that map nowhere are
    predicted legitimate.
    """
    organic = report.spam_counts
    if organic.shape != matrix.counts.shape:
        raise ValueError(f"spam counts {organic.shape} do not match "
                         f"matrix {matrix.counts.shape}")
    has_timing = np.array([len(occupied_bins(row)) >= 2
                           for row in factors.final_patterns])
    spam_members = [i for c in clusters if c.verdict is Label.INORGANIC_SPAM
                    and c.total_weight > min_inorganic_weight
                    for i in c.member_indices if has_timing[i]]
    if spam_members:
        inorganic = (factors.effective_activation[:, spam_members]
                     @ factors.final_patterns[spam_members])
    else:
        inorganic = np.zeros_like(organic)
    total = organic + inorganic
    if extra_spam_cells is not None:
        total = total + extra_spam_cells
    cell_spam = np.clip(total, 0.0, matrix.counts)

    # The factorization routinely splits one heavily reused structure
    # across near-duplicate rows, leaving part of its mass on rows that
    # fall below the retention threshold alone. For click attribution,
    # rows whose occupied support lies inside a retained row's support
    # count toward the same structure.
    flagged_set = set(report.reused_pattern_indices) | set(spam_members)
    supports = {c: set(occupied_bins(row).tolist())
                for c, row in enumerate(factors.final_patterns)}
    rescued = [c for c, occ in supports.items()
               if c not in flagged_set and occ and any(
                   len(occ & supports[b]) >= 0.8 * len(occ)
                   for b in flagged_set)]
    attributable = total
    if rescued:
        attributable = attributable + (
            factors.effective_activation[:, rescued]
            @ factors.final_patterns[rescued])
    attributable = np.clip(attributable, 0.0, matrix.counts)

    if source_flag_threshold is not None and cell_spam.size:
        groups = np.asarray(row_groups if row_groups is not None
                            else np.arange(matrix.counts.shape[0]))
        n_groups = int(groups.max()) + 1 if groups.size else 0
        spam_by_group = np.zeros(n_groups)
        seen_by_group = np.zeros(n_groups)
        active_rows = np.zeros(n_groups)
        row_spam = cell_spam.sum(axis=1)
        np.add.at(spam_by_group, groups, row_spam)
        np.add.at(seen_by_group, groups, matrix.counts.sum(axis=1))
        np.add.at(active_rows, groups, (row_spam >= 0.5).astype(float))
        share = np.divide(spam_by_group, seen_by_group,
                          out=np.zeros_like(spam_by_group),
                          where=seen_by_group > 0)
        coverage = float(np.any(cell_spam >= 0.5, axis=0).mean())
        gate = source_flag_threshold + coverage
        flagged = (share > gate) & (active_rows >= min_active_rows)
        keep = flagged[groups][:, None]
        cell_spam = np.where(keep, cell_spam, 0.0)
        attributable = np.where(keep, attributable, 0.0)

    if locate is None:
        row_of = {s: i for i, s in enumerate(matrix.sources)}

        def locate(click: ClickEvent):
            i = row_of.get(click.source)
            j = bin_index(click.timestamp, matrix.bin_config)
            return None if i is None or j is None else (i, j)

    cells: dict[tuple[int, int], list[int]] = {}
    for k, click in enumerate(clicks):
        cell = locate(click)
        if cell is None:
            continue
        cells.setdefault(cell, []).append(k)

    predicted = np.zeros(len(clicks), dtype=bool)
    ts = [c.timestamp for c in clicks]
    for (i, j), idx in cells.items():
        quota = min(len(idx), int(math.floor(attributable[i, j] + 0.5)))
        # the clamp caps the estimate at the cell count, so a multi-click
        # cell never carries better evidence for "all clicks are fake"
        # than for "all but one": leave one out
        if quota >= len(idx) >= 2:
            quota = len(idx) - 1
        if quota <= 0:
            continue
        idx.sort(key=lambda k: (ts[k], k))
        for k in idx[:quota]:
            predicted[k] = True
    return ClickVerdicts(cell_spam=cell_spam, organic_cells=organic,
                         inorganic_cells=inorganic, predicted_spam=predicted)


def write_verdicts_csv(verdicts: ClickVerdicts, matrix: TrafficMatrix, path) -> None:
    """Sparse per-cell verdict export: only cells with traffic or spam."""
    observed = matrix.counts
    with open(path, "w", encoding="utf-8") as f:
        f.write("source,bin,observed,predicted_spam,verdict_breakdown\n")
        rows, cols = np.nonzero((observed > 0) | (verdicts.cell_spam > 0))
        for i, j in zip(rows, cols):
            breakdown = (f"organic={verdicts.organic_cells[i, j]!r};"
                         f"inorganic={verdicts.inorganic_cells[i, j]!r}")
            f.write(f"{matrix.sources[i]},{j},{observed[i, j]},"
                    f"{verdicts.cell_spam[i, j]!r},{breakdown}\n")


def write_cluster_summary(clusters: Sequence[PatternCluster], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, cluster in enumerate(clusters):
            record = {
                "cluster_id": i,
                "size": len(cluster.member_indices),
                "entropy": cluster.normalized_entropy,
                "weight": cluster.total_weight,
                "verdict": cluster.verdict.value if cluster.verdict else None,
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")

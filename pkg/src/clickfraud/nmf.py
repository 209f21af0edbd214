"""Multi-layer non-negative matrix factorization of traffic matrices.

A counts matrix X (sources x time bins) is decomposed as X ~ A @ P with
A the non-negative activation matrix (sources x rank) and P the
non-negative pattern matrix whose rows are timing patterns over bins.
Factors are fit by alternating multiplicative updates under the
Frobenius objective, stopping when the relative reconstruction error
||X - A@P||_F / ||X||_F drops to `epsilon` or an iteration cap is hit.

Layers nest: each subsequent layer refactorizes the previous layer's
pattern matrix after a moving-window average (pooling) that absorbs
small time misalignments. Selected pattern rows of the first layer can
be frozen to known timing patterns; frozen rows are never altered by
the updates, while their activation columns still adapt.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

# Floor added to multiplicative-update denominators; keeps every update
# finite on any non-negative input.
DENOM_FLOOR = 1e-12

DEFAULT_RANK_CAP = 128


@dataclass(frozen=True)
class FactorizationConfig:
    """Knobs for a multi-layer factorization.

    rank=None resolves, per layer, to the layer input's row count capped
    at min(rows, bins, rank_cap); an explicit rank is likewise clamped
    to each layer's dimensions.
    """

    num_layers: int = 2
    rank: Optional[int] = None
    epsilon: float = 0.05
    pool_halfwidth: int = 12
    max_iters: int = 2000
    seed: int = 0
    rank_cap: int = DEFAULT_RANK_CAP

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.rank is not None and self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.pool_halfwidth < 0:
            raise ValueError("pool_halfwidth must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")

    def resolve_rank(self, rows: int, cols: int) -> int:
        if self.rank is None:
            return max(1, min(rows, cols, self.rank_cap))
        return max(1, min(self.rank, rows, cols))


@dataclass
class LayerFactors:
    """One layer's factors and its convergence record."""

    activation: np.ndarray        # rows x rank
    patterns: np.ndarray          # rank x bins
    residual: float               # final relative Frobenius error
    iterations: int
    converged: bool
    frozen_rows: tuple[int, ...] = ()
    residual_history: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class MultiLayerFactorization:
    layers: list[LayerFactors]
    effective_activation: np.ndarray   # n x deepest rank, product of activations
    final_patterns: np.ndarray         # deepest layer's patterns, unpooled
    bait_rows: tuple[int, ...] = ()    # frozen layer-1 pattern row indices

    @property
    def all_converged(self) -> bool:
        return all(layer.converged for layer in self.layers)


def frobenius_error(target: np.ndarray, activation: np.ndarray,
                    patterns: np.ndarray) -> float:
    """Relative Frobenius error ||target - activation@patterns|| / ||target||."""
    target = np.asarray(target, dtype=float)
    activation = np.asarray(activation, dtype=float)
    patterns = np.asarray(patterns, dtype=float)
    if activation.shape[1] != patterns.shape[0] or \
            target.shape != (activation.shape[0], patterns.shape[1]):
        raise ValueError(
            f"dimension mismatch: target {target.shape}, "
            f"activation {activation.shape}, patterns {patterns.shape}")
    norm = np.linalg.norm(target)
    if norm == 0.0:
        return 0.0
    return float(np.linalg.norm(target - activation @ patterns) / norm)


def _normalize_frozen(
    frozen_patterns: Optional[Mapping[int, np.ndarray]],
    rank: int, cols: int,
) -> dict[int, np.ndarray]:
    if not frozen_patterns:
        return {}
    items = frozen_patterns.items() if isinstance(frozen_patterns, Mapping) \
        else frozen_patterns
    out: dict[int, np.ndarray] = {}
    for idx, row in items:
        idx = int(idx)
        if not 0 <= idx < rank:
            raise ValueError(f"frozen row index {idx} outside rank {rank}")
        row = np.asarray(row, dtype=float).reshape(-1)
        if row.shape[0] != cols:
            raise ValueError(f"frozen row length {row.shape[0]} != {cols} bins")
        if np.any(row < 0):
            raise ValueError("frozen rows must be non-negative")
        out[idx] = row.copy()
    return out


def factorize_layer(
    matrix: np.ndarray,
    rank: int,
    epsilon: float = 0.05,
    max_iters: int = 2000,
    seed: int = 0,
    frozen_patterns: Optional[Mapping[int, np.ndarray]] = None,
    on_iteration: Optional[Callable[[int, np.ndarray, np.ndarray, float], None]] = None,
) -> LayerFactors:
    """Single-layer NMF by multiplicative updates.

    Factors start uniform random in (0, 1] from `seed` (frozen rows set
    from `frozen_patterns` and never updated). At convergence each
    non-frozen pattern row is rescaled to unit maximum with its
    activation column scaled inversely, so a pattern's total activation
    counts how often the pattern occurs; the rescale leaves the product
    A @ P unchanged. `on_iteration(i, activation, patterns, residual)`
    is invoked after every full update for instrumentation.
    """
    x = np.asarray(matrix, dtype=float)
    if x.ndim != 2:
        raise ValueError("input must be a 2-d matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("input must be finite")
    if np.any(x < 0):
        raise ValueError("input must be non-negative")
    rows, cols = x.shape
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > min(rows, cols):
        raise ValueError(f"rank {rank} exceeds min(dims) = {min(rows, cols)}")
    frozen = _normalize_frozen(frozen_patterns, rank, cols)

    norm = np.linalg.norm(x)
    if norm == 0.0:
        activation = np.zeros((rows, rank))
        patterns = np.zeros((rank, cols))
        for idx, row in frozen.items():
            patterns[idx] = row
        return LayerFactors(activation, patterns, residual=0.0, iterations=0,
                            converged=True, frozen_rows=tuple(sorted(frozen)),
                            residual_history=np.zeros(0))

    rng = np.random.default_rng(seed)
    activation = 1.0 - rng.random((rows, rank))
    patterns = 1.0 - rng.random((rank, cols))
    frozen_idx = np.array(sorted(frozen), dtype=int)
    if len(frozen_idx):
        patterns[frozen_idx] = np.stack([frozen[i] for i in frozen_idx])
    free_idx = np.array([i for i in range(rank) if i not in frozen], dtype=int)

    history = np.empty(max_iters)
    residual = np.inf
    iterations = 0
    for it in range(max_iters):
        activation *= (x @ patterns.T) / (activation @ (patterns @ patterns.T)
                                          + DENOM_FLOOR)
        if len(free_idx):
            numer = activation.T @ x
            denom = (activation.T @ activation) @ patterns + DENOM_FLOOR
            patterns[free_idx] *= numer[free_idx] / denom[free_idx]
        residual = float(np.linalg.norm(x - activation @ patterns) / norm)
        iterations = it + 1
        history[it] = residual
        if on_iteration is not None:
            on_iteration(it, activation, patterns, residual)
        if residual <= epsilon:
            break

    # fix the scale ambiguity: unit-max pattern rows, A @ P unchanged
    if len(free_idx):
        peaks = patterns[free_idx].max(axis=1)
        scale = np.where(peaks > 0, peaks, 1.0)
        patterns[free_idx] /= scale[:, None]
        activation[:, free_idx] *= scale[None, :]
    if len(frozen_idx):
        patterns[frozen_idx] = np.stack([frozen[i] for i in frozen_idx])

    return LayerFactors(activation, patterns, residual=residual,
                        iterations=iterations, converged=residual <= epsilon,
                        frozen_rows=tuple(sorted(frozen)),
                        residual_history=history[:iterations].copy())


def average_pool(patterns: np.ndarray, halfwidth: int) -> np.ndarray:
    """Moving-window mean over bins, window [j-c, j+c] truncated at edges."""
    if halfwidth < 0:
        raise ValueError("halfwidth must be >= 0")
    patterns = np.asarray(patterns, dtype=float)
    if halfwidth == 0:
        return patterns.copy()
    rows, cols = patterns.shape
    csum = np.zeros((rows, cols + 1))
    np.cumsum(patterns, axis=1, out=csum[:, 1:])
    j = np.arange(cols)
    lo = np.maximum(0, j - halfwidth)
    hi = np.minimum(cols - 1, j + halfwidth)
    return (csum[:, hi + 1] - csum[:, lo]) / (hi - lo + 1)


def multilayer_factorize(
    counts: np.ndarray,
    config: FactorizationConfig,
    frozen_patterns: Optional[Mapping[int, np.ndarray]] = None,
) -> MultiLayerFactorization:
    """Nested factorization with inter-layer average pooling.

    Layer 1 factorizes `counts` (frozen pattern rows apply here only);
    layer k+1 factorizes the pooled pattern matrix of layer k. The
    effective activation is the product of all activation matrices and
    the reported final patterns are the deepest layer's, unpooled.
    """
    x = np.asarray(counts, dtype=float)
    layers: list[LayerFactors] = []
    for k in range(config.num_layers):
        rank = config.resolve_rank(*x.shape)
        layer = factorize_layer(
            x, rank=rank, epsilon=config.epsilon, max_iters=config.max_iters,
            seed=config.seed + k,
            frozen_patterns=frozen_patterns if k == 0 else None)
        layers.append(layer)
        if k + 1 < config.num_layers:
            x = average_pool(layer.patterns, config.pool_halfwidth)

    effective = layers[0].activation.copy()
    for layer in layers[1:]:
        effective = effective @ layer.activation
    return MultiLayerFactorization(
        layers=layers,
        effective_activation=effective,
        final_patterns=layers[-1].patterns.copy(),
        bait_rows=layers[0].frozen_rows,
    )


# --- factor container ---------------------------------------------------------
#
# Plain-text container, one section per layer: a header with dims,
# layer index, frozen rows, residual, iteration count and convergence
# flag, followed by row-major decimal values (round-trip exact).


def _write_matrix(f, name: str, matrix: np.ndarray) -> None:
    rows, cols = matrix.shape
    f.write(f"{name} {rows} {cols}\n")
    for row in matrix:
        f.write(" ".join(repr(float(v)) for v in row) + "\n")


def _read_matrix(lines, name: str) -> np.ndarray:
    tag, rows, cols = next(lines).split()
    if tag != name:
        raise ValueError(f"expected section {name!r}, found {tag!r}")
    rows, cols = int(rows), int(cols)
    data = np.empty((rows, cols))
    for i in range(rows):
        data[i] = np.fromstring(next(lines), sep=" ")
    return data


def save_factors(factors: MultiLayerFactorization, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"layers {len(factors.layers)}\n")
        f.write(f"bait_rows {','.join(map(str, factors.bait_rows)) or '-'}\n")
        for k, layer in enumerate(factors.layers):
            f.write(f"layer {k}\n")
            f.write(f"residual {layer.residual!r}\n")
            f.write(f"iterations {layer.iterations}\n")
            f.write(f"converged {int(layer.converged)}\n")
            f.write(f"frozen {','.join(map(str, layer.frozen_rows)) or '-'}\n")
            _write_matrix(f, "activation", layer.activation)
            _write_matrix(f, "patterns", layer.patterns)


def load_factors(path) -> MultiLayerFactorization:
    with open(path, "r", encoding="utf-8") as f:
        lines = iter(f.read().splitlines())
    n_layers = int(next(lines).split()[1])
    bait_text = next(lines).split()[1]
    bait_rows = tuple(int(v) for v in bait_text.split(",")) if bait_text != "-" else ()
    layers: list[LayerFactors] = []
    for _ in range(n_layers):
        next(lines)  # "layer k"
        residual = float(next(lines).split()[1])
        iterations = int(next(lines).split()[1])
        converged = bool(int(next(lines).split()[1]))
        frozen_text = next(lines).split()[1]
        frozen = tuple(int(v) for v in frozen_text.split(",")) if frozen_text != "-" else ()
        activation = _read_matrix(lines, "activation")
        patterns = _read_matrix(lines, "patterns")
        layers.append(LayerFactors(activation, patterns, residual, iterations,
                                   converged, frozen))
    effective = layers[0].activation.copy()
    for layer in layers[1:]:
        effective = effective @ layer.activation
    return MultiLayerFactorization(layers, effective,
                                   layers[-1].patterns.copy(), bait_rows)

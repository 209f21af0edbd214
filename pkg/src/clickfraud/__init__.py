"""Click-fraud detection from click-timing analysis.

The toolkit synthesizes labeled clickstreams, decomposes traffic
matrices with multi-layer non-negative matrix factorization, isolates
organic (replayed) and inorganic (fabricated) clickspam, and evaluates
a passive mimicry defence and an active bait-click defence.
"""

from .clickstream import (ClickEvent, Label, TimeBinConfig, TrafficMatrix,
                          bin_index, build_traffic_matrix, fold_by_day,
                          interclick_times, read_clickstream, write_clickstream)
from .synth import (AttackKind, AttackSpec, LabeledClickSet, LegitModel,
                    VolumeClass, gen_inorganic, gen_legitimate,
                    gen_organic_replay, superimpose)
from .nmf import (FactorizationConfig, LayerFactors, MultiLayerFactorization,
                  average_pool, factorize_layer, frobenius_error,
                  load_factors, multilayer_factorize, save_factors)
from .isolation import (ClickVerdicts, OrganicReport, PatternCluster,
                        classify_clusters, cluster_patterns, isolate_organic,
                        pattern_entropy, verdict_clicks)
from .bait import (BaitConfig, BaitPattern, detect_with_bait, fraud_fraction,
                   inject_bait, make_bait_pattern, schedule_bait, strip_bait)
from .harness import (DetectionReport, ExperimentConfig, PipelineConfig,
                      compute_rates, ingest_clickstream, run_experiment,
                      run_single)

__all__ = [name for name in dir() if not name.startswith("_")]

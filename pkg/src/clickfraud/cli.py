"""Command-line pipelines: synth, detect, bait, eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 the factorization
did not converge (partial outputs are still written).
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

from .bait import parse_bait_config, write_fractions_csv
from .clickstream import TimeBinConfig, write_clickstream
from .harness import (DataError, ExperimentConfig, PipelineConfig, UsageError,
                      compute_rates, ingest_clickstream, parse_experiment_config,
                      parse_pipeline_config, run_bait_pipeline,
                      run_passive_pipeline, run_experiment, run_single)
from .isolation import ClickVerdicts, write_cluster_summary, write_verdicts_csv
from .nmf import save_factors
from .synth import write_provenance
from .clickstream import Label, SECONDS_PER_DAY

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NONCONVERGED = 3


def _read_text(path: Path, what: str) -> str:
    if not path.exists():
        raise DataError(f"no such {what}: {path}")
    return path.read_text(encoding="utf-8")


def _load_pipeline_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return parse_pipeline_config(_read_text(Path(path), "factor config"))


def _infer_window(clicks, meta_path: Path) -> tuple[float, float]:
    """(window_start, duration_days) from a sidecar if present, else the data."""
    if meta_path.exists():
        values = {}
        for line in meta_path.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                key, _, value = line.partition("=")
                values[key.strip()] = value.strip()
        if "window_start" in values and "duration_days" in values:
            return float(values["window_start"]), float(values["duration_days"])
    if not clicks:
        raise DataError("empty clickstream and no sidecar metadata")
    t0 = min(c.timestamp for c in clicks)
    t1 = max(c.timestamp for c in clicks)
    start = math.floor(t0 / SECONDS_PER_DAY) * SECONDS_PER_DAY
    days = max(1, int(math.ceil((t1 - start + 1e-9) / SECONDS_PER_DAY)))
    return start, float(days)


def _write_rates(clicks, predicted, out_dir: Path, converged: bool,
                 discarded: int) -> None:
    labeled = any(c.label is not Label.UNKNOWN for c in clicks)
    lines = [f"converged={int(converged)}", f"discarded={discarded}"]
    if labeled:
        report = compute_rates([c.label for c in clicks], predicted)
        lines += [
            f"fpr={report.fpr!r}",
            f"tpr={report.tpr!r}",
            f"organic_tpr={report.organic_tpr!r}",
            f"inorganic_tpr={report.inorganic_tpr!r}",
            f"n_legit={report.n_legit}",
            f"n_spam={report.n_spam}",
            f"false_positives={report.false_positives}",
            f"true_positives={report.true_positives}",
        ]
        lines += [f"warning={w}" for w in report.warnings]
    else:
        lines.append("warning=no ground-truth labels; rates not computed")
    (out_dir / "rates.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _unfolded_verdicts(result) -> ClickVerdicts:
    n = result.matrix.num_sources
    v = result.verdicts
    return ClickVerdicts(
        cell_spam=v.cell_spam.reshape(n, -1),
        organic_cells=v.organic_cells.reshape(n, -1),
        inorganic_cells=v.inorganic_cells.reshape(n, -1),
        predicted_spam=v.predicted_spam,
    )


def _write_pipeline_outputs(result, clicks, out_dir: Path,
                            dump_factors: bool) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_verdicts_csv(_unfolded_verdicts(result), result.matrix,
                       out_dir / "verdicts.csv")
    write_cluster_summary(result.clusters, out_dir / "clusters.jsonl")
    _write_rates(clicks, result.verdicts.predicted_spam, out_dir,
                 result.converged, result.discarded)
    if dump_factors:
        save_factors(result.factors, out_dir / "factors.txt")


def cmd_synth(args) -> int:
    config = parse_experiment_config(_read_text(Path(args.config),
                                                "experiment config"))
    if len(config.attack_classes) > 1:
        raise UsageError("synth emits one stream; configure at most one "
                         "attack class")
    class_name = config.attack_classes[0] if config.attack_classes else None
    _report, _result, stream = run_single(config, class_name, rep=0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_clickstream(stream.clicks, out)
    provenance = dict(stream.provenance)
    provenance["window_start"] = repr(stream.window_start)
    provenance["duration_days"] = repr(stream.duration_days)
    write_provenance(provenance, out.with_suffix(out.suffix + ".meta"))
    return EXIT_OK


def cmd_detect(args) -> int:
    if args.mode != "passive":
        raise UsageError(f"unknown mode {args.mode!r}; the active pipeline "
                         "is the `bait` subcommand")
    parsed = ingest_clickstream(args.in_path)
    in_path = Path(args.in_path)
    start, days = _infer_window(parsed.clicks,
                                in_path.with_suffix(in_path.suffix + ".meta"))
    bins = TimeBinConfig.for_days(int(math.ceil(days)), window_start=start)
    pipeline = _load_pipeline_config(args.factor_config)
    result = run_passive_pipeline(parsed.clicks, bins, pipeline)
    out_dir = Path(args.out)
    _write_pipeline_outputs(result, parsed.clicks, out_dir, args.dump_factors)
    if parsed.errors:
        with open(out_dir / "ingest_errors.txt", "w", encoding="utf-8") as f:
            for e in parsed.errors:
                f.write(f"line {e.line_number}: {e.reason}: {e.line}\n")
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_bait(args) -> int:
    parsed = ingest_clickstream(args.in_path)
    in_path = Path(args.in_path)
    start, days = _infer_window(parsed.clicks,
                                in_path.with_suffix(in_path.suffix + ".meta"))
    bins = TimeBinConfig.for_days(int(math.ceil(days)), window_start=start)
    sources = []
    seen = set()
    for c in parsed.clicks:
        if c.source not in seen:
            seen.add(c.source)
            sources.append(c.source)
    try:
        bait_config = parse_bait_config(
            _read_text(Path(args.bait_config), "bait config"), sources)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    pipeline = _load_pipeline_config(args.factor_config)

    from .synth import LabeledClickSet
    labeled = [c for c in parsed.clicks if c.label is not Label.UNKNOWN]
    if len(labeled) == len(parsed.clicks):
        stream = LabeledClickSet(tuple(parsed.clicks), {}, start, days)
        from .bait import strip_bait
        observed = strip_bait(stream, bait_config).clicks
    else:
        observed = tuple(parsed.clicks)
    result = run_bait_pipeline(observed, bins, bait_config, pipeline)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_fractions_csv(result.bait_detection, out_dir / "fractions.csv")
    _write_pipeline_outputs(result, observed, out_dir, args.dump_factors)
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_eval(args) -> int:
    config = parse_experiment_config(_read_text(Path(args.experiment),
                                                "experiment config"))
    run_experiment(config, out_dir=Path(args.out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clickfraud",
        description="Click-fraud detection from click timing: synthesize "
                    "traffic, run the passive or bait defence, and sweep "
                    "experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate labeled synthetic traffic",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", required=True,
                   help="experiment config file (key=value)")
    p.add_argument("--out", required=True, help="output clickstream CSV; a "
                   ".meta provenance sidecar is written next to it")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("detect", help="passive mimicry detection on a "
                       "clickstream CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--in", dest="in_path", required=True,
                   help="input clickstream CSV")
    p.add_argument("--mode", default="passive", help="detection mode")
    p.add_argument("--factor-config", default=None,
                   help="factor config file (key=value); defaults: "
                        "num_layers=1 rank=auto rank_cap=128 epsilon=0.05 "
                        "pool_halfwidth=12 max_iters=200 seed=0 "
                        "repeat_threshold=2.0 similarity_threshold=0.9 "
                        "entropy_threshold=0.5")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-factors", action="store_true",
                   help="also write the factor container (factors.txt)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("bait", help="active bait-click detection on a "
                       "clickstream CSV",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--in", dest="in_path", required=True,
                   help="input clickstream CSV (bait clicks are stripped "
                        "before detection)")
    p.add_argument("--bait-config", required=True,
                   help="bait config file; keys: delta_seconds (comma list), "
                        "count=4, targets=all, flag_threshold=0.05, seed=0")
    p.add_argument("--factor-config", default=None,
                   help="factor config file; same keys as detect")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-factors", action="store_true",
                   help="also write the factor container (factors.txt)")
    p.set_defaults(func=cmd_bait)

    p = sub.add_parser("eval", help="full experiment sweep with a "
                       "Tables-style report",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--experiment", required=True,
                   help="experiment config file (key=value); every key has a "
                        "default, see README")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage problems; 2 is reserved for
        # data errors here
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())

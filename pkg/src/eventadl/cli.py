"""Command-line entry point: prepare, run, eval, sweep, stats.

Exit codes: 0 success, 1 configuration or I/O error, 2 evaluation/schema error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import date
from pathlib import Path

from .backend import AuthFailure, UnknownPromptKey
from .config import ConfigError, RunConfig, load_config
from .evaluation import EvalError
from .ingest import IngestError
from .pipeline import DEFAULT_THRESHOLDS, evaluate_files, prepare, run, sweep, timespan_stats

log = logging.getLogger("eventadl")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    return [int(x) for x in _floats(text)]


def _add_overrides(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("overrides (take precedence over the config file)")
    g.add_argument("--raw", type=Path, help="raw CASAS log")
    g.add_argument("--output-dir", type=Path)
    g.add_argument("--cache", type=Path)
    g.add_argument("--test-start", type=date.fromisoformat, help="first day of the test span (YYYY-MM-DD)")
    g.add_argument("--test-days", type=int)
    g.add_argument("--k", type=int, help="events per window")
    g.add_argument("--s", type=int, help="step between window targets, in events")
    g.add_argument("--n", type=int, help="repetitions per window")
    g.add_argument("--temperature", type=float, help="temperature for single-shot runs (N=1)")
    g.add_argument("--repetition-temperature", type=float, help="temperature when N > 1")
    g.add_argument("--seed", type=int, help="tie-break seed")
    g.add_argument("--parallelism", type=int, help="windows in flight")
    g.add_argument("--backend", choices=("openai", "scripted"))
    g.add_argument("--endpoint")
    g.add_argument("--model")
    g.add_argument("--script", type=Path, help="scripted-backend response file")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    return cfg.with_overrides(
        raw=args.raw,
        output_dir=args.output_dir,
        cache=args.cache,
        test_start=args.test_start,
        test_days=args.test_days,
        k=args.k,
        s=args.s,
        n=args.n,
        temperature=args.temperature,
        repetition_temperature=args.repetition_temperature,
        parallelism=args.parallelism,
        tie_seed=args.seed,
        backend_kind=args.backend,
        backend_endpoint=args.endpoint,
        backend_model=args.model,
        backend_script=args.script,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eventadl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse, clean and split a raw log")
    p.add_argument("--config", type=Path, required=True)
    _add_overrides(p)

    p = sub.add_parser("run", help="recognize activities over the test span")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--fresh", action="store_true", help="ignore an existing prediction file")
    _add_overrides(p)

    p = sub.add_parser("eval", help="score a prediction file against a ground-truth timeline")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--timeline", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("report"))
    p.add_argument("--thresholds", type=_floats, default=list(DEFAULT_THRESHOLDS))
    p.add_argument("--delta", type=float, default=1.0, help="grid interval in seconds")
    p.add_argument("--config", type=Path, help="config whose catalog orders the report rows")

    p = sub.add_parser("sweep", help="repeat run/eval over k, N or confidence thresholds")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--axis", choices=("k", "th", "N"), required=True)
    p.add_argument("--values", type=_floats, required=True)
    p.add_argument("--delta", type=float, default=1.0)
    _add_overrides(p)

    p = sub.add_parser("stats", help="window-timespan distribution per k")
    p.add_argument("--events", type=Path, help="cleaned events CSV")
    p.add_argument("--config", type=Path, help="use the prepared test events of this config")
    p.add_argument("--k", type=_ints, default=[5, 10, 20, 30, 50])
    p.add_argument("--out", type=Path, default=Path("timespans.csv"))
    return parser


def _dispatch(args) -> None:
    if args.command == "prepare":
        summary = prepare(_config(args))
        print(summary.render())
        print(f"prepared bundle written to {summary.out_dir}")
    elif args.command == "run":
        result = run(_config(args), fresh=args.fresh)
        m = result.manifest
        print(f"{m['windows']} windows ({m['resumed_windows']} resumed), {m['backend_calls']} backend calls, "
              f"{m['cache_hits']} cache hits")
        print(f"outcomes: {m['outcomes']}")
        print(f"predictions: {result.predictions_path}")
    elif args.command == "eval":
        labels = list(load_config(args.config).catalog.labels) if args.config else None
        res = evaluate_files(args.predictions, args.timeline, args.out, args.thresholds, args.delta, labels)
        print(f"weighted F1 {res.report.weighted_f1:.4f}, accuracy {res.report.accuracy:.4f}, "
              f"excluded {res.report.excluded_seconds:.0f} s")
        for path in res.files:
            print(f"wrote {path}")
    elif args.command == "sweep":
        path = sweep(_config(args), args.axis, args.values, delta_seconds=args.delta)
        print(path.read_text(), end="")
        print(f"wrote {path}")
    elif args.command == "stats":
        if args.events is None and args.config is None:
            raise ConfigError("stats needs --events or --config")
        events = args.events or load_config(args.config).prepared_dir / "test_events.csv"
        rows = timespan_stats(events, args.k, args.out)
        for r in rows:
            print(f"k={r.k}: median {r.median:.1f} s (p25 {r.p25:.1f}, p75 {r.p75:.1f}) over {r.count} windows")
        print(f"wrote {args.out}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except EvalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, IngestError, OSError, ValueError, AuthFailure, UnknownPromptKey) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

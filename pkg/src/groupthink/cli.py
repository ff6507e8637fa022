"""Command line entry point: ``groupthink {run,bench,verify}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from .config import BenchSettings, ConfigError, RunConfig, default_config, load_config
from .engine import ContextOverflowError, SourceError
from .evaluation import load_task, summary_table
from .latency import total_latency
from .scheduler import MODE_ALIASES, Mode

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_INVARIANT = 0, 1, 2, 3

log = logging.getLogger("groupthink")


class ValidationError(Exception):
    pass


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    prompt_file = getattr(args, "prompt_file", None)
    if prompt_file:
        path = Path(prompt_file)
        if not path.is_file():
            raise ValidationError(f"prompt file not found: {path}")
        cfg = replace(cfg, prompt=path.read_text(encoding="utf-8"))
    task_file = getattr(args, "task", None)
    if task_file:
        path = Path(task_file)
        if not path.is_file():
            raise ValidationError(f"task file not found: {path}")
        cfg = replace(cfg, task=load_task(path))
    return cfg.with_overrides(
        mode=getattr(args, "mode", None),
        n=getattr(args, "n", None),
        budget=getattr(args, "budget", None),
        seed=args.seed,
        source=args.source,
    )


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    from .runner import execute

    cfg = _load(args)
    if args.temperature is not None:
        cfg = replace(cfg, sampler={**cfg.sampler, "temperature": args.temperature})
    if args.answer_budget is not None:
        cfg = replace(cfg, answer=replace(cfg.answer, budget=args.answer_budget))
    transcript = execute(cfg, timestamp=not args.no_timestamp)
    out = _out_dir(args.out)
    path = out / "transcript.jsonl"
    transcript.write(path)
    lengths = transcript.lengths()
    print(f"mode {transcript.config.mode.short}, N={transcript.config.n_agents}, budget {transcript.config.budget}")
    for n, length in lengths.items():
        print(f"  thinker {n}: {length} tokens")
    print(f"per-thinker latency: {transcript.latency_tokens} tokens ({transcript.total_tokens} thought tokens total)")
    if cfg.hardware is not None:
        seconds = total_latency(transcript.config, cfg.hardware, transcript.latency_tokens)
        print(f"estimated think-phase time: {seconds:.6g} s")
    answer = "".join(t.text for t in transcript.answer)
    if answer:
        print(f"answer: {answer!r}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .runner import run_bench

    cfg = _load(args)
    bench = cfg.bench
    if args.modes is not None:
        bench = replace(bench, modes=tuple(Mode.parse(m) for m in args.modes))
    if args.ns is not None:
        bench = replace(bench, n_agents=tuple(args.ns))
    if args.budget is not None:
        bench = replace(bench, budget=args.budget)
    if args.runs is not None:
        bench = replace(bench, runs=args.runs)
    if not bench.modes or not bench.n_agents:
        raise ValidationError("bench grid is empty: declare at least one mode and one N")
    cfg = replace(cfg, bench=bench)
    curves, csv_text = run_bench(cfg, jobs=args.jobs)
    out = _out_dir(args.out)
    csv_path = out / "curves.csv"
    csv_path.write_text(csv_text, encoding="utf-8")
    budgets = bench.report_budgets or _default_report_budgets(bench)
    table = summary_table(curves, budgets)
    lines = [f"task: {curves[0].task}", f"runs per cell: {bench.runs}", table]
    if not args.no_timestamp:
        lines.insert(0, f"generated: {datetime.now(timezone.utc).isoformat(timespec='seconds')}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(table)
    print(f"wrote {csv_path}")
    return EXIT_OK


def _default_report_budgets(bench: BenchSettings) -> tuple[int, ...]:
    k = bench.budget
    return tuple(sorted({max(1, k // 4), max(1, k // 2), k}))


def cmd_verify(args) -> int:
    from .verify import run_checks

    if args.mask_file and not Path(args.mask_file).is_file():
        raise ValidationError(f"mask file not found: {args.mask_file}")
    results = run_checks(args.filter, args.mask_file)
    if not results:
        raise ValidationError(f"no checks match filter {args.filter!r}")
    for r in results:
        print(r.line())
        if args.verbose:
            for f in r.failures[1:]:
                print(f"    {f}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_INVARIANT if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupthink", description="Concurrent-thinker decoding runs, sweeps and checks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--source", choices=("toy", "scripted", "remote"))
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--no-timestamp", action="store_true", help="omit wall-clock timestamps from outputs")

    run = sub.add_parser("run", help="think + answer phases, writes transcript.jsonl")
    common(run)
    run.add_argument("--mode", choices=sorted(MODE_ALIASES))
    run.add_argument("--n", type=int, help="number of thinkers")
    run.add_argument("--budget", type=int, help="per-thinker token budget")
    run.add_argument("--temperature", type=float)
    run.add_argument("--answer-budget", type=int)
    run.add_argument("--prompt-file")
    run.set_defaults(func=cmd_run)

    bench = sub.add_parser("bench", help="coverage sweep, writes curves.csv and summary.txt")
    common(bench)
    bench.add_argument("--task", help="task JSON file")
    bench.add_argument("--modes", nargs="*", choices=sorted(MODE_ALIASES))
    bench.add_argument("--ns", nargs="*", type=int, help="thinker counts")
    bench.add_argument("--budget", type=int)
    bench.add_argument("--runs", type=int)
    bench.add_argument("--jobs", type=int, default=1)
    bench.set_defaults(func=cmd_bench)

    verify = sub.add_parser("verify", help="run the invariant suite")
    verify.add_argument("--filter", help="only checks whose name contains this")
    verify.add_argument("--mask-file", help="check a serialized mask against the oracle")
    verify.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="list every failure")
    verify.set_defaults(func=cmd_verify, config=None, seed=None, source=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SourceError, ContextOverflowError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Glue between a :class:`RunConfig`, token sources and the two phases."""

from __future__ import annotations

from dataclasses import dataclass, replace
from datetime import datetime, timezone

from .config import DEFAULT_PROMPT, RunConfig
from .engine import (
    ModelSource,
    SamplerConfig,
    ScriptedSource,
    Transcript,
    run_answer_phase,
    run_think_phase,
)
from .evaluation import Cell, CoverageCurve, EnumerationTask, Task, curves_to_csv, sweep
from .latency import total_latency
from .model import Model, init_model, load_checkpoint
from .scheduler import GroupConfig, Mode
from .scripts import programs_for
from .tokenizer import ByteTokenizer, Token

TOKENIZER = ByteTokenizer()


@dataclass(frozen=True)
class Prepared:
    group: GroupConfig
    prompt: list[Token]
    agent_prompts: list[list[Token]]


def prompt_text(cfg: RunConfig) -> str:
    if cfg.task is not None and cfg.prompt == DEFAULT_PROMPT:
        return cfg.task.prompt
    return cfg.prompt


def prepare(cfg: RunConfig, group: GroupConfig | None = None) -> Prepared:
    """Tokenize the prompt and the per-thinker headers into a fixed layout."""
    group = group or cfg.group
    prompt = [TOKENIZER.token(TOKENIZER.BOS), *TOKENIZER.tokens(prompt_text(cfg))]
    headers = [cfg.answer.agent_header.format(n=n) for n in range(1, group.n_agents + 1)]
    width = max(len(TOKENIZER.encode(h)) for h in headers)
    agent_prompts = [TOKENIZER.fit(h, width) for h in headers]
    group = replace(group, prompt_len=len(prompt), agent_prompt_len=width)
    return Prepared(group, prompt, agent_prompts)


def load_model(cfg: RunConfig) -> Model:
    if cfg.source.checkpoint:
        return load_checkpoint(cfg.source.checkpoint)
    return init_model(cfg.model)


def default_task(cfg: RunConfig) -> Task:
    return cfg.task if cfg.task is not None else EnumerationTask(cfg.prompt, 100)


def make_source(cfg: RunConfig, group: GroupConfig, *, model: Model | None = None):
    kind = cfg.source.kind
    if kind == "toy":
        return ModelSource(model or load_model(cfg), TOKENIZER, strategy=cfg.source.strategy)
    if kind == "scripted":
        programs = programs_for(default_task(cfg), cfg.source.script, group.n_agents, cfg.source.pool_size)
        return ScriptedSource(programs, seed=int(cfg.sampler.get("seed", 0)))
    if kind == "remote":
        from .remote import CompletionClient, RemoteSource

        client = CompletionClient(cfg.source.remote.resolved())
        return RemoteSource(
            client,
            prompt_text(cfg),
            temperature=float(cfg.sampler.get("temperature", 0.0)),
            seed=int(cfg.sampler.get("seed", 0)),
        )
    raise ValueError(f"unknown source {kind!r}")


def sampler_of(cfg: RunConfig) -> SamplerConfig:
    return SamplerConfig.from_dict(cfg.sampler)


def end_token_of(cfg: RunConfig) -> int | None:
    return TOKENIZER.END_OF_THOUGHT if cfg.source.kind == "toy" else None


def execute(cfg: RunConfig, *, timestamp: bool = True, model: Model | None = None) -> Transcript:
    """Think phase, then answer phase; returns the full transcript."""
    prep = prepare(cfg)
    if cfg.source.kind == "toy" and model is None:
        model = load_model(cfg)
    source = make_source(cfg, prep.group, model=model)
    sampler = sampler_of(cfg)
    end = end_token_of(cfg)
    transcript = run_think_phase(
        prep.group,
        source,
        prep.prompt,
        sampler,
        prep.agent_prompts,
        end_token=end,
        model_checksum=model.checksum() if model is not None else None,
    )
    transcript.source = cfg.source.kind
    transcript.answer = run_answer_phase(
        prep.group,
        source,
        transcript,
        sampler,
        cfg.answer.budget,
        answer_header=TOKENIZER.tokens(cfg.answer.header),
        end_token=end,
    )
    if timestamp:
        transcript.timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return transcript


def bench_cells(cfg: RunConfig) -> list[Cell]:
    cells = []
    for mode in cfg.bench.modes:
        ns = (1,) if mode is Mode.SINGLE_COT else cfg.bench.n_agents
        for n in ns:
            cell = Cell(mode.value, n)
            if cell not in cells:
                cells.append(cell)
    if not cells:
        raise ValueError("bench grid is empty: declare at least one mode and one N")
    return cells


def run_bench(cfg: RunConfig, *, jobs: int = 1) -> tuple[list[CoverageCurve], str]:
    """Sweep every (mode, N) cell; returns curves and the CSV text."""
    task = default_task(cfg)
    if not cfg.bench.n_agents or not cfg.bench.modes:
        raise ValueError("bench grid is empty: declare at least one mode and one N")
    if task.kind == "programming" and cfg.source.kind == "toy":
        raise ValueError("programming coverage needs step markers; use the scripted source or a judge")
    cells = bench_cells(cfg)
    budget = cfg.bench.budget
    model = load_model(cfg) if cfg.source.kind == "toy" else None
    base_seed = int(cfg.sampler.get("seed", 0))
    bench_cfg = replace(cfg, task=task)

    def run_fn(cell: Cell, r: int) -> Transcript:
        group = GroupConfig(cell.n_agents, budget, Mode(cell.mode))
        one = replace(bench_cfg, group=group, sampler={**cfg.sampler, "seed": base_seed + r})
        one = replace(one, answer=replace(one.answer, budget=0))
        return execute(one, timestamp=False, model=model)

    curves = sweep(cells, task, cfg.bench.runs, budget, run_fn, jobs=jobs)
    estimate = None
    if cfg.hardware is not None:
        hw = cfg.hardware

        def estimate(curve: CoverageCurve, k: int) -> float:
            return total_latency(GroupConfig(curve.n_agents, budget, Mode(curve.mode)), hw, k)

    return curves, curves_to_csv(curves, estimate)

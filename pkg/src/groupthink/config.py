"""JSON run configuration: one document with model, group, sampler, task,
hardware, source and bench sections."""

from __future__ import annotations

import json
import re
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from pathlib import Path

from .evaluation import Task, load_task
from .latency import HardwareProfile
from .model import ModelConfig
from .remote import RemoteConfig
from .scheduler import GroupConfig, Layout, Mode
from .scripts import SCRIPT_KINDS

SECTIONS = {"model", "group", "sampler", "task", "hardware", "source", "bench", "prompt", "prompt_file", "answer"}
SOURCES = ("toy", "scripted", "remote")
DEFAULT_PROMPT = "List distinct first names, one per line."


class ConfigError(ValueError):
    """Invalid configuration; the message names the file and line when known."""


def _line_of(text: str, key: str) -> int | None:
    m = re.search(rf'"{re.escape(key)}"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


@dataclass(frozen=True)
class AnswerSettings:
    budget: int = 32
    header: str = "\nAnswer:"
    agent_header: str = "\nThinker {n}:"


@dataclass(frozen=True)
class SourceSettings:
    kind: str = "toy"
    script: str = "disjoint"
    pool_size: int | None = None
    strategy: str = "auto"
    checkpoint: str | None = None
    remote: RemoteConfig = field(default_factory=RemoteConfig)


@dataclass(frozen=True)
class BenchSettings:
    modes: tuple[Mode, ...] = (Mode.SINGLE_COT, Mode.GROUP_THINK_LOCKSTEP)
    n_agents: tuple[int, ...] = (1, 2, 4)
    budget: int = 128
    runs: int = 1
    report_budgets: tuple[int, ...] = ()


@dataclass(frozen=True)
class RunConfig:
    group: GroupConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: dict = field(default_factory=lambda: {"temperature": 0.0, "seed": 0})
    prompt: str = DEFAULT_PROMPT
    answer: AnswerSettings = field(default_factory=AnswerSettings)
    source: SourceSettings = field(default_factory=SourceSettings)
    task: Task | None = None
    hardware: HardwareProfile | None = None
    bench: BenchSettings = field(default_factory=BenchSettings)
    path: Path | None = None

    def with_overrides(
        self,
        *,
        mode: str | None = None,
        n: int | None = None,
        budget: int | None = None,
        seed: int | None = None,
        source: str | None = None,
    ) -> RunConfig:
        g = self.group
        cfg = self
        if mode is not None or n is not None or budget is not None:
            new_mode = Mode.parse(mode) if mode is not None else g.mode
            layout = g.layout if mode is None else None
            g = GroupConfig(
                n if n is not None else g.n_agents,
                budget if budget is not None else g.budget,
                new_mode,
                g.prompt_len,
                g.agent_prompt_len,
                layout,
                g.max_context,
            )
            cfg = replace(cfg, group=g)
        if seed is not None:
            cfg = replace(cfg, sampler={**cfg.sampler, "seed": seed})
        if source is not None:
            if source not in SOURCES:
                raise ConfigError(f"unknown source {source!r} (expected one of {', '.join(SOURCES)})")
            cfg = replace(cfg, source=replace(cfg.source, kind=source))
        return cfg


def _section(data: Mapping, name: str, ctx: _Ctx) -> dict:
    value = data.get(name, {})
    if not isinstance(value, Mapping):
        raise ctx.error(name, f"section {name!r} must be an object")
    return dict(value)


@dataclass
class _Ctx:
    text: str
    origin: str

    def error(self, key: str, message: str) -> ConfigError:
        line = _line_of(self.text, key)
        where = f"{self.origin}:{line}" if line else self.origin
        return ConfigError(f"{where}: {message}")


def _build(kind, data: dict, key: str, ctx: _Ctx):
    try:
        return kind(data)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ctx.error(key, f"invalid {key!r}: {exc}") from None


def parse_config(text: str, *, origin: str = "<config>", base: Path | None = None) -> RunConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{origin}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, Mapping):
        raise ConfigError(f"{origin}:1: config must be a JSON object")
    ctx = _Ctx(text, origin)
    unknown = sorted(set(data) - SECTIONS)
    if unknown:
        raise ctx.error(unknown[0], f"unknown section {unknown[0]!r}")

    model_d = _section(data, "model", ctx)
    checkpoint = model_d.pop("checkpoint", None)
    model = _build(lambda d: ModelConfig(**d), model_d, "model", ctx)

    if "prompt" in data and "prompt_file" in data:
        raise ctx.error("prompt_file", "give either 'prompt' or 'prompt_file', not both")
    prompt = data.get("prompt", DEFAULT_PROMPT)
    if "prompt_file" in data:
        ppath = Path(data["prompt_file"])
        if base is not None and not ppath.is_absolute():
            ppath = base / ppath
        if not ppath.is_file():
            raise ctx.error("prompt_file", f"prompt file not found: {ppath}")
        prompt = ppath.read_text(encoding="utf-8")
    if not isinstance(prompt, str):
        raise ctx.error("prompt", "prompt must be a string")

    def group_of(d: dict) -> GroupConfig:
        allowed = {"mode", "n_agents", "budget", "layout", "max_context"}
        extra = set(d) - allowed
        if extra:
            raise ctx.error(sorted(extra)[0], f"unknown group field {sorted(extra)[0]!r}")
        return GroupConfig(
            int(d.get("n_agents", 1)),
            int(d.get("budget", 16)),
            Mode.parse(d.get("mode", "cot")),
            layout=Layout(d["layout"]) if d.get("layout") else None,
            max_context=d.get("max_context"),
        )

    group = _build(group_of, _section(data, "group", ctx), "group", ctx)

    sampler = {"temperature": 0.0, "seed": 0, **_section(data, "sampler", ctx)}
    extra = set(sampler) - {"temperature", "seed", "agent_seeds"}
    if extra:
        raise ctx.error(sorted(extra)[0], f"unknown sampler field {sorted(extra)[0]!r}")
    if not isinstance(sampler["temperature"], (int, float)) or sampler["temperature"] < 0:
        raise ctx.error("temperature", "temperature must be a number >= 0")

    answer = _build(lambda d: AnswerSettings(**d), _section(data, "answer", ctx), "answer", ctx)
    if answer.budget < 0:
        raise ctx.error("answer", "answer budget must be >= 0")

    def source_of(d: dict) -> SourceSettings:
        remote = RemoteConfig.from_dict(d.pop("remote", {}))
        s = SourceSettings(**d, remote=remote)
        if s.kind not in SOURCES:
            raise ctx.error("kind", f"unknown source kind {s.kind!r} (expected one of {', '.join(SOURCES)})")
        if s.script not in SCRIPT_KINDS:
            raise ctx.error("script", f"unknown script kind {s.script!r}")
        return s

    src_d = _section(data, "source", ctx)
    if checkpoint is not None:
        src_d.setdefault("checkpoint", checkpoint)
    source = _build(source_of, src_d, "source", ctx)
    if source.checkpoint and base is not None and not Path(source.checkpoint).is_absolute():
        source = replace(source, checkpoint=str(base / source.checkpoint))

    task = None
    if "task" in data:
        task = _build(lambda d: load_task(d, base=base), _section(data, "task", ctx), "task", ctx)

    hardware = None
    if "hardware" in data:
        hardware = _build(HardwareProfile.from_dict, _section(data, "hardware", ctx), "hardware", ctx)

    def bench_of(d: dict) -> BenchSettings:
        extra = set(d) - {"modes", "n_agents", "budget", "runs", "report_budgets"}
        if extra:
            raise ctx.error(sorted(extra)[0], f"unknown bench field {sorted(extra)[0]!r}")
        defaults = BenchSettings()
        return BenchSettings(
            tuple(Mode.parse(m) for m in d.get("modes", defaults.modes)),
            tuple(int(n) for n in d.get("n_agents", defaults.n_agents)),
            int(d.get("budget", defaults.budget)),
            int(d.get("runs", defaults.runs)),
            tuple(int(b) for b in d.get("report_budgets", defaults.report_budgets)),
        )

    bench = _build(bench_of, _section(data, "bench", ctx), "bench", ctx)

    return RunConfig(group, model, sampler, prompt, answer, source, task, hardware, bench, None)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = parse_config(path.read_text(encoding="utf-8"), origin=str(path), base=path.parent)
    return replace(cfg, path=path)


def default_config() -> RunConfig:
    return parse_config("{}")

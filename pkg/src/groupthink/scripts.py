"""Scripted thinker programs for deterministic coverage experiments.

Every program emits one whole item (or one REGISTER line) per step, so a
chain of k tokens carries exactly k candidate answers.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence

import numpy as np

from .engine import Program, ScriptContext
from .evaluation import EnumerationTask, FloydWarshallTask, ProgrammingTask, Task

SCRIPT_KINDS = ("disjoint", "collision_avoiding", "overlapping")


def item_pool(size: int, prefix: str = "item") -> list[str]:
    width = max(4, len(str(size - 1)))
    return [f"{prefix}{i:0{width}d}" for i in range(size)]


def _line(text: str) -> str:
    return text + "\n"


def _strip(token: str) -> str:
    return token.strip()


def disjoint(units: Sequence[str], n_agents: int) -> dict[int, Program]:
    """Agent n at step k emits ``units[(k-1)N + (n-1)]``; stops when exhausted."""

    def program(n: int) -> Program:
        def step(ctx: ScriptContext) -> str | None:
            i = (ctx.step - 1) * n_agents + (n - 1)
            return _line(units[i]) if i < len(units) else None

        return step

    return {n: program(n) for n in range(1, n_agents + 1)}


def collision_avoiding(units: Sequence[str], n_agents: int) -> dict[int, Program]:
    """Draw a random unit; re-draw while it already appears in the visible chains.

    With cross-visibility of same-step tokens (interleaved mode with agent
    prompts) the union never repeats; without visibility the draws collide
    freely. Without agent prompts the step-1 query row is shared and sees no
    thoughts, so step-1 draws may collide.
    """

    def step(ctx: ScriptContext) -> str | None:
        seen = {_strip(t) for t in ctx.visible_tokens()}
        fresh = [u for u in units if u not in seen]
        if not fresh:
            return None
        return _line(fresh[int(ctx.rng.integers(len(fresh)))])

    return {n: step for n in range(1, n_agents + 1)}


def overlapping(units: Sequence[str], n_agents: int) -> dict[int, Program]:
    """Every agent walks the same list in the same order."""

    def step(ctx: ScriptContext) -> str | None:
        return _line(units[ctx.step - 1]) if ctx.step <= len(units) else None

    return {n: step for n in range(1, n_agents + 1)}


_BUILDERS: dict[str, Callable[[Sequence[str], int], dict[int, Program]]] = {
    "disjoint": disjoint,
    "collision_avoiding": collision_avoiding,
    "overlapping": overlapping,
}


def fw_units(task: FloydWarshallTask) -> list[str]:
    """Correct REGISTER lines for every cell, row-major."""
    oracle = task.oracle
    n = oracle.shape[0]
    return [
        f"REGISTER Edges[{i}][{j}] = {'inf' if math.isinf(oracle[i, j]) else f'{oracle[i, j]:g}'}"
        for i in range(n)
        for j in range(n)
    ]


def programming_units(task: ProgrammingTask) -> list[str]:
    return [f"<DONE_STEP_{s}>" for s in range(1, len(task.steps) + 1)]


def enumeration_units(task: EnumerationTask, pool_size: int | None = None) -> list[str]:
    if task.valid_set is not None:
        return sorted(task.valid_set)
    return item_pool(pool_size or 4 * task.target)


def task_units(task: Task, pool_size: int | None = None) -> list[str]:
    if isinstance(task, FloydWarshallTask):
        return fw_units(task)
    if isinstance(task, ProgrammingTask):
        return programming_units(task)
    return enumeration_units(task, pool_size)


def programs_for(task: Task, kind: str, n_agents: int, pool_size: int | None = None) -> dict[int, Program]:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown script kind {kind!r} (expected one of {', '.join(SCRIPT_KINDS)})")
    return _BUILDERS[kind](task_units(task, pool_size), n_agents)


def duplicate_count(agent_texts: Sequence[str]) -> int:
    """Emitted items minus distinct items across all agents."""
    items = [line.strip() for text in agent_texts for line in text.splitlines() if line.strip()]
    return len(items) - len(set(items))


def random_units(rng: np.random.Generator, pool: Sequence[str], count: int) -> list[str]:
    return [pool[int(i)] for i in rng.integers(len(pool), size=count)]

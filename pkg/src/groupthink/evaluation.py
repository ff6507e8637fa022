"""Completion-coverage metrics, task definitions and coverage sweeps."""

from __future__ import annotations

import csv
import io
import json
import math
import re
import unicodedata
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np

INF = math.inf


# -- Floyd-Warshall ------------------------------------------------------------


def _parse_weight(value) -> float:
    if isinstance(value, str):
        key = value.strip().lower()
        if key in ("inf", "infinity", "+inf", "∞"):
            return INF
        return float(key)
    if value is None:
        return INF
    return float(value)


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Directed graph as a dense weight matrix; ``inf`` marks a missing edge."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weights must be square, got shape {w.shape}")
        if np.isnan(w).any():
            raise ValueError("weights contain NaN")
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")
        if not (np.diag(w) == 0).all():
            raise ValueError("diagonal weights must be 0")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence]) -> WeightedGraph:
        return cls(np.array([[_parse_weight(v) for v in row] for row in rows], dtype=np.float64))


def floyd_warshall(graph: WeightedGraph) -> np.ndarray:
    dist = graph.weights.copy()
    n = graph.size
    for k in range(n):
        for i in range(n):
            for j in range(n):
                through = dist[i, k] + dist[k, j]
                if through < dist[i, j]:
                    dist[i, j] = through
    return dist


def fw_step_oracle(edges: np.ndarray | WeightedGraph, k: int) -> np.ndarray:
    """Every entry after one sweep with pivot ``k``: ``min(e[i][j], e[i][k] + e[k][j])``."""
    e = edges.weights if isinstance(edges, WeightedGraph) else np.asarray(edges, dtype=np.float64)
    if not 0 <= k < e.shape[0]:
        raise ValueError(f"pivot {k} outside 0..{e.shape[0] - 1}")
    return np.minimum(e, e[:, [k]] + e[[k], :])


class RegisterEntry(NamedTuple):
    i: int
    j: int
    value: float


class RegisterParse(NamedTuple):
    entries: list[RegisterEntry]
    malformed: int


_NUMBER = r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d+)?"
_REGISTER = re.compile(
    r"REGISTER\s+Edges\s*\[\s*(\d+)\s*\]\s*\[\s*(\d+)\s*\]\s*=\s*"
    rf"({_NUMBER}|[-+]?inf(?:inity)?|∞)(?!\w|\.\d)",
    re.IGNORECASE,
)
_KEYWORD = re.compile(r"REGISTER", re.IGNORECASE)


def parse_registers(text: str) -> RegisterParse:
    """All well-formed ``REGISTER Edges[i][j] = v`` lines, in order.

    Any other occurrence of the ``REGISTER`` keyword counts as malformed.
    """
    entries = []
    starts = set()
    for match in _REGISTER.finditer(text):
        starts.add(match.start())
        entries.append(RegisterEntry(int(match[1]), int(match[2]), _parse_weight(match[3])))
    malformed = sum(1 for m in _KEYWORD.finditer(text) if m.start() not in starts)
    return RegisterParse(entries, malformed)


def coverage_fw(entries: Iterable[RegisterEntry], oracle: np.ndarray) -> float:
    """Fraction of matrix cells with at least one registration equal to the oracle."""
    oracle = np.asarray(oracle, dtype=np.float64)
    n = oracle.shape[0]
    solved = set()
    for e in entries:
        if 0 <= e.i < n and 0 <= e.j < n and e.value == oracle[e.i, e.j]:
            solved.add((e.i, e.j))
    return len(solved) / oracle.size


# -- enumeration --------------------------------------------------------------

_LIST_MARKER = re.compile(r"(?:^|(?<=\s))(?:\d+[.)]|[-*•])\s+")
_SEPARATORS = re.compile(r"[\n,]")


def normalize_item(text: str) -> str:
    text = unicodedata.normalize("NFKC", text)
    return " ".join(text.split()).strip(" .;:").lower()


def extract_items(text: str) -> set[str]:
    items = set()
    for piece in _SEPARATORS.split(text):
        for part in _LIST_MARKER.split(piece):
            item = normalize_item(part)
            if item:
                items.add(item)
    return items


def coverage_enumeration(
    agent_texts: Iterable[str],
    target: int,
    valid_set: Iterable[str] | None = None,
) -> float:
    """``min(1, distinct items / target)`` over the union of all agents' items."""
    if target < 1:
        raise ValueError("target count must be >= 1")
    items = set()
    for text in agent_texts:
        items |= extract_items(text)
    if valid_set is not None:
        items &= {normalize_item(v) for v in valid_set}
    return min(1.0, len(items) / target)


# -- programming ----------------------------------------------------------------

_STEP_MARKER = re.compile(r"<(DONE|PARTIAL)_STEP_(\d+)>")


def parse_step_markers(text: str) -> dict[int, str]:
    """Step id -> ``"done"`` or ``"partial"``; a DONE marker always wins."""
    status: dict[int, str] = {}
    for kind, step in _STEP_MARKER.findall(text):
        sid = int(step)
        if kind == "DONE":
            status[sid] = "done"
        else:
            status.setdefault(sid, "partial")
    return status


def programming_coverage(text: str, total_steps: int, partial_weight: float = 0.0) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0.0 <= partial_weight <= 1.0:
        raise ValueError("partial_weight must lie in [0, 1]")
    credit = 0.0
    for sid, state in parse_step_markers(text).items():
        if 1 <= sid <= total_steps:
            credit += 1.0 if state == "done" else partial_weight
    return min(1.0, credit / total_steps)


class Judge(Protocol):
    """External text-to-text evaluator that inserts step markers into a response."""

    def mark_steps(self, question: str, standard_answer: str, response: str) -> str: ...


# -- tasks ----------------------------------------------------------------------


@dataclass(frozen=True)
class EnumerationTask:
    prompt: str
    target: int
    valid_set: frozenset[str] | None = None
    name: str = "enumeration"
    kind = "enumeration"

    def score(self, agent_texts: Sequence[str]) -> float:
        return coverage_enumeration(agent_texts, self.target, self.valid_set)


@dataclass(frozen=True, eq=False)
class FloydWarshallTask:
    graph: WeightedGraph
    pivot: int = 0
    full_run: bool = False
    name: str = "floyd_warshall"
    kind = "floyd_warshall"

    @property
    def oracle(self) -> np.ndarray:
        if self.full_run:
            return floyd_warshall(self.graph)
        return fw_step_oracle(self.graph, self.pivot)

    @property
    def prompt(self) -> str:
        rows = ", ".join(
            "[" + ", ".join("inf" if math.isinf(v) else f"{v:g}" for v in row) + "]"
            for row in self.graph.weights
        )
        scope = "the full algorithm" if self.full_run else f"the step for k={self.pivot}"
        return (
            "Update Edges[i][j] = min(Edges[i][j], Edges[i][k] + Edges[k][j]) "
            f"for {scope} on a graph with n={self.graph.size} nodes and register each result "
            f"as REGISTER Edges[i][j] = value.\nEdges = [{rows}]"
        )

    def score(self, agent_texts: Sequence[str]) -> float:
        entries = [e for text in agent_texts for e in parse_registers(text).entries]
        return coverage_fw(entries, self.oracle)


@dataclass(frozen=True)
class ProgrammingTask:
    prompt: str
    steps: tuple[str, ...]
    standard_answer: str = ""
    partial_weight: float = 0.0
    judge: Judge | None = field(default=None, compare=False)
    name: str = "programming"
    kind = "programming"

    def score(self, agent_texts: Sequence[str]) -> float:
        response = "\n".join(agent_texts)
        marked = self.judge.mark_steps(self.prompt, self.standard_answer, response) if self.judge else response
        return programming_coverage(marked, len(self.steps), self.partial_weight)


Task = EnumerationTask | FloydWarshallTask | ProgrammingTask

# Fixed five-node instance used by the divide-and-conquer prompt.
EXAMPLE_GRAPH = [
    [0, 4, "inf", 5, "inf"],
    ["inf", 0, 1, "inf", 6],
    [2, "inf", 0, 3, "inf"],
    ["inf", "inf", 1, 0, 2],
    [1, "inf", "inf", 4, 0],
]


def load_task(spec: Mapping | str | Path, *, judge: Judge | None = None, base: Path | None = None) -> Task:
    """Task from a JSON mapping (or a path to one)."""
    if not isinstance(spec, Mapping):
        path = Path(spec)
        spec = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
    if "path" in spec and len(spec) == 1:
        path = Path(spec["path"])
        if base is not None and not path.is_absolute():
            path = base / path
        return load_task(path, judge=judge)
    kind = spec.get("type")
    name = spec.get("name", kind)
    if kind == "enumeration":
        valid = spec.get("valid_set")
        if isinstance(valid, str):
            vpath = Path(valid) if base is None else base / valid
            valid = [line for line in vpath.read_text(encoding="utf-8").splitlines() if line.strip()]
        return EnumerationTask(
            spec["prompt"], int(spec["L"]), frozenset(valid) if valid is not None else None, name or "enumeration"
        )
    if kind == "floyd_warshall":
        weights = spec.get("weights", EXAMPLE_GRAPH)
        return FloydWarshallTask(
            WeightedGraph.from_rows(weights),
            int(spec.get("pivot", 0)),
            bool(spec.get("full_run", False)),
            name or "floyd_warshall",
        )
    if kind == "programming":
        return ProgrammingTask(
            spec["prompt"],
            tuple(spec["steps"]),
            spec.get("standard_answer", ""),
            float(spec.get("partial_weight", 0.0)),
            judge,
            name or "programming",
        )
    raise ValueError(f"unknown task type {kind!r}")


# -- sweeps ---------------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    step: int
    coverage: float
    std: float


@dataclass(frozen=True)
class CoverageCurve:
    task: str
    mode: str
    n_agents: int
    runs: int
    points: tuple[CurvePoint, ...]

    def __post_init__(self) -> None:
        steps = [p.step for p in self.points]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("curve steps must be strictly increasing")
        if any(not 0.0 <= p.coverage <= 1.0 for p in self.points):
            raise ValueError("coverage must lie in [0, 1]")

    def at(self, k: int) -> float:
        for p in self.points:
            if p.step == k:
                return p.coverage
        raise KeyError(k)

    def first_step_reaching(self, level: float) -> int | None:
        for p in self.points:
            if p.coverage >= level:
                return p.step
        return None


def coverage_by_prefix(task: Task, transcript, budget: int | None = None) -> list[float]:
    """Coverage of the transcript truncated at every per-thinker step ``0..budget``."""
    budget = transcript.config.budget if budget is None else budget
    return [task.score(transcript.agent_texts(k)) for k in range(budget + 1)]


@dataclass(frozen=True)
class Cell:
    mode: str
    n_agents: int


RunFn = Callable[[Cell, int], object]


def sweep(
    cells: Sequence[Cell],
    task: Task,
    runs: int,
    budget: int,
    run_fn: RunFn,
    *,
    jobs: int = 1,
) -> list[CoverageCurve]:
    """Mean/std coverage curves over ``runs`` transcripts per (mode, N) cell.

    ``run_fn(cell, run_index)`` returns a transcript generated with per-thinker
    budget ``budget``; curves come from truncating it at each step.
    """
    if runs < 1:
        raise ValueError("need at least one run per cell")
    if not cells:
        raise ValueError("empty sweep grid")

    def one(cell: Cell) -> CoverageCurve:
        table = np.array([coverage_by_prefix(task, run_fn(cell, r), budget) for r in range(runs)])
        mean, std = table.mean(axis=0), table.std(axis=0)
        points = tuple(
            CurvePoint(k, float(min(1.0, max(0.0, mean[k]))), float(std[k])) for k in range(budget + 1)
        )
        return CoverageCurve(task.name, cell.mode, cell.n_agents, runs, points)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            curves = list(pool.map(one, cells))
    else:
        curves = [one(c) for c in cells]
    return sorted(curves, key=lambda c: (c.mode, c.n_agents))


CSV_COLUMNS = ["task", "mode", "n_agents", "step_k", "coverage_mean", "coverage_std", "runs"]


def curves_to_csv(
    curves: Sequence[CoverageCurve],
    estimated_seconds: Callable[[CoverageCurve, int], float] | None = None,
) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(CSV_COLUMNS)
    if estimated_seconds is not None:
        header.append("estimated_seconds")
    writer.writerow(header)
    for curve in curves:
        for p in curve.points:
            row = [curve.task, curve.mode, curve.n_agents, p.step, f"{p.coverage:.6f}", f"{p.std:.6f}", curve.runs]
            if estimated_seconds is not None:
                row.append(f"{estimated_seconds(curve, p.step):.6e}")
            writer.writerow(row)
    return buf.getvalue()


def read_curves_csv(text: str) -> list[CoverageCurve]:
    grouped: dict[tuple, list[CurvePoint]] = {}
    meta: dict[tuple, int] = {}
    for row in csv.DictReader(io.StringIO(text)):
        key = (row["task"], row["mode"], int(row["n_agents"]))
        grouped.setdefault(key, []).append(
            CurvePoint(int(row["step_k"]), float(row["coverage_mean"]), float(row["coverage_std"]))
        )
        meta[key] = int(row["runs"])
    return [CoverageCurve(t, m, n, meta[(t, m, n)], tuple(pts)) for (t, m, n), pts in grouped.items()]


def summary_table(curves: Sequence[CoverageCurve], budgets: Sequence[int]) -> str:
    width = max([len("mode"), *(len(c.mode) for c in curves)]) + 2
    head = f"{'mode':<{width}}{'N':>3}" + "".join(f"{'k=' + str(b):>9}" for b in budgets)
    lines = [head]
    for c in curves:
        cells = []
        for b in budgets:
            try:
                cells.append(f"{c.at(b):>9.3f}")
            except KeyError:
                cells.append(f"{'-':>9}")
        lines.append(f"{c.mode:<{width}}{c.n_agents:>3}" + "".join(cells))
    return "\n".join(lines)

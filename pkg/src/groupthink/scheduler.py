"""Token layout, generation order and visibility for concurrent thinkers.

Positions are 1-based: the shared prompt occupies ``1..prompt_len``.  Three
layouts are supported:

``local``
    Agent-level batch layout.  Every agent's own thoughts sit after a reserved
    block of ``budget * (n_agents - 1)`` indices, so thought ``k`` of any agent
    lands at ``prompt_len + agent_prompt_len + budget * (n_agents - 1) + k``.
``slots``
    Single-sequence layout.  Agent ``n`` owns a contiguous slot of
    ``agent_prompt_len + budget`` indices; the KV cache is filled in
    generation order, which interleaves the slots.
``contiguous``
    Every agent decodes as if it were alone (``prompt_len + agent_prompt_len + k``).

The mask built here (:func:`build_mask`) is derived by replaying the
generation order, while :func:`visibility_oracle` states the visibility rules
directly.  The two are independent routes to the same sets.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache

import numpy as np


class Mode(str, Enum):
    GROUP_THINK_LOCKSTEP = "group_think_lockstep"
    GROUP_THINK_INTERLEAVED = "group_think_interleaved"
    INDEPENDENT_SAMPLING = "independent_sampling"
    SINGLE_COT = "single_cot"

    @classmethod
    def parse(cls, value: str | Mode) -> Mode:
        if isinstance(value, Mode):
            return value
        key = value.strip().lower()
        if key in MODE_ALIASES:
            return MODE_ALIASES[key]
        try:
            return cls(key)
        except ValueError:
            choices = ", ".join(sorted(MODE_ALIASES))
            raise ValueError(f"unknown mode {value!r} (expected one of {choices})") from None

    @property
    def short(self) -> str:
        return _MODE_SHORT[self]

    @property
    def is_group_think(self) -> bool:
        return self in (Mode.GROUP_THINK_LOCKSTEP, Mode.GROUP_THINK_INTERLEAVED)


MODE_ALIASES = {
    "cot": Mode.SINGLE_COT,
    "is": Mode.INDEPENDENT_SAMPLING,
    "gt-lockstep": Mode.GROUP_THINK_LOCKSTEP,
    "gt-interleaved": Mode.GROUP_THINK_INTERLEAVED,
}
_MODE_SHORT = {mode: alias for alias, mode in MODE_ALIASES.items()}


class Role(str, Enum):
    PROMPT = "prompt"
    AGENT_PROMPT = "agent_prompt"
    THOUGHT = "thought"
    ANSWER = "answer"


class Layout(str, Enum):
    LOCAL = "local"
    SLOTS = "slots"
    CONTIGUOUS = "contiguous"


_DEFAULT_LAYOUT = {
    Mode.GROUP_THINK_LOCKSTEP: Layout.LOCAL,
    Mode.GROUP_THINK_INTERLEAVED: Layout.SLOTS,
    Mode.INDEPENDENT_SAMPLING: Layout.CONTIGUOUS,
    Mode.SINGLE_COT: Layout.CONTIGUOUS,
}


@dataclass(frozen=True, order=True)
class TokenCoordinate:
    """Identity of a token independent of cache order and position index.

    ``agent`` is 0 for the shared prompt; ``step`` is 0 for prompt and
    agent-prompt tokens; ``offset`` disambiguates tokens within those roles.
    """

    agent: int
    step: int
    role: Role
    offset: int = 0

    def __str__(self) -> str:
        if self.role is Role.PROMPT:
            return f"P[{self.offset}]"
        if self.role is Role.AGENT_PROMPT:
            return f"AP{self.agent}[{self.offset}]"
        if self.role is Role.ANSWER:
            return f"Y[{self.step}]"
        return f"({self.agent},{self.step})"

    def to_dict(self) -> dict:
        return {"agent": self.agent, "step": self.step, "role": self.role.value, "offset": self.offset}

    @classmethod
    def from_dict(cls, d: Mapping) -> TokenCoordinate:
        return cls(int(d["agent"]), int(d["step"]), Role(d["role"]), int(d.get("offset", 0)))


def prompt_coord(i: int) -> TokenCoordinate:
    return TokenCoordinate(0, 0, Role.PROMPT, i)


def agent_prompt_coord(agent: int, i: int) -> TokenCoordinate:
    return TokenCoordinate(agent, 0, Role.AGENT_PROMPT, i)


def thought(agent: int, step: int) -> TokenCoordinate:
    return TokenCoordinate(agent, step, Role.THOUGHT)


@dataclass(frozen=True)
class GroupConfig:
    n_agents: int
    budget: int
    mode: Mode = Mode.GROUP_THINK_LOCKSTEP
    prompt_len: int = 0
    agent_prompt_len: int = 0
    layout: Layout | None = None
    max_context: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.layout is not None:
            object.__setattr__(self, "layout", Layout(self.layout))
        if self.n_agents < 1:
            raise ValueError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.prompt_len < 0 or self.agent_prompt_len < 0:
            raise ValueError("prompt_len and agent_prompt_len must be nonnegative")
        if self.mode is Mode.SINGLE_COT and self.n_agents != 1:
            raise ValueError(f"single_cot requires n_agents == 1, got {self.n_agents}")
        if self.max_context is not None and self.span > self.max_context:
            raise ValueError(
                f"layout needs {self.span} positions but max_context is {self.max_context}"
            )

    @property
    def effective_layout(self) -> Layout:
        return self.layout if self.layout is not None else _DEFAULT_LAYOUT[self.mode]

    @property
    def span(self) -> int:
        """Highest position index the layout can reach."""
        layout = self.effective_layout
        base = self.prompt_len + self.agent_prompt_len
        if layout is Layout.LOCAL:
            return base + self.budget * self.n_agents
        if layout is Layout.SLOTS:
            return self.prompt_len + self.n_agents * (self.agent_prompt_len + self.budget)
        return base + self.budget

    def with_budget(self, budget: int) -> GroupConfig:
        return replace(self, budget=budget, max_context=None)

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "budget": self.budget,
            "mode": self.mode.value,
            "prompt_len": self.prompt_len,
            "agent_prompt_len": self.agent_prompt_len,
            "layout": self.effective_layout.value,
            "max_context": self.max_context,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> GroupConfig:
        mode = Mode.parse(d["mode"])
        layout = Layout(d["layout"]) if d.get("layout") else None
        if layout is _DEFAULT_LAYOUT[mode]:
            layout = None
        return cls(
            n_agents=int(d["n_agents"]),
            budget=int(d["budget"]),
            mode=mode,
            prompt_len=int(d.get("prompt_len", 0)),
            agent_prompt_len=int(d.get("agent_prompt_len", 0)),
            layout=layout,
            max_context=d.get("max_context"),
        )


@dataclass(frozen=True)
class AgentSlot:
    agent: int
    first_position: int
    length: int

    @property
    def positions(self) -> range:
        return range(self.first_position, self.first_position + self.length)


def _check_agent_step(cfg: GroupConfig, agent: int, k: int) -> None:
    if not 1 <= agent <= cfg.n_agents:
        raise ValueError(f"agent {agent} outside 1..{cfg.n_agents}")
    if not 1 <= k <= cfg.budget:
        raise ValueError(f"step {k} outside 1..{cfg.budget}")


def assign_position_local(cfg: GroupConfig, agent: int, k: int) -> int:
    _check_agent_step(cfg, agent, k)
    return cfg.prompt_len + cfg.agent_prompt_len + cfg.budget * (cfg.n_agents - 1) + k


def reserved_position_local(cfg: GroupConfig, viewer: int, agent: int, k: int) -> int:
    """Position of another agent's thought ``(agent, k)`` inside ``viewer``'s reserved block.

    The block is ordered by ascending (other agent, step), skipping the viewer.
    """
    _check_agent_step(cfg, agent, k)
    _check_agent_step(cfg, viewer, 1)
    if viewer == agent:
        raise ValueError("an agent's own thoughts are not placed in its reserved block")
    rank = agent - 1 if agent < viewer else agent - 2
    return cfg.prompt_len + cfg.agent_prompt_len + rank * cfg.budget + k


def assign_slots_interleaved(cfg: GroupConfig) -> list[AgentSlot]:
    width = cfg.agent_prompt_len + cfg.budget
    return [
        AgentSlot(n, cfg.prompt_len + (n - 1) * width + 1, width)
        for n in range(1, cfg.n_agents + 1)
    ]


def position_of(cfg: GroupConfig, coord: TokenCoordinate) -> int:
    """Position index of ``coord`` under the configuration's layout."""
    if coord.role is Role.PROMPT:
        if not 0 <= coord.offset < cfg.prompt_len:
            raise ValueError(f"prompt offset {coord.offset} outside prompt of length {cfg.prompt_len}")
        return coord.offset + 1
    if coord.role is Role.ANSWER:
        raise ValueError("answer tokens are laid out by the answer phase, not the think layout")
    layout = cfg.effective_layout
    if coord.role is Role.AGENT_PROMPT:
        _check_agent_step(cfg, coord.agent, 1)
        if not 0 <= coord.offset < cfg.agent_prompt_len:
            raise ValueError(f"agent-prompt offset {coord.offset} outside 0..{cfg.agent_prompt_len - 1}")
        if layout is Layout.SLOTS:
            return assign_slots_interleaved(cfg)[coord.agent - 1].first_position + coord.offset
        return cfg.prompt_len + coord.offset + 1
    if layout is Layout.LOCAL:
        return assign_position_local(cfg, coord.agent, coord.step)
    _check_agent_step(cfg, coord.agent, coord.step)
    if layout is Layout.SLOTS:
        slot = assign_slots_interleaved(cfg)[coord.agent - 1]
        return slot.first_position + cfg.agent_prompt_len + coord.step - 1
    return cfg.prompt_len + cfg.agent_prompt_len + coord.step


def local_row_layout(cfg: GroupConfig, viewer: int, k: int) -> dict[int, TokenCoordinate | None]:
    """Occupancy of ``viewer``'s data point in the local layout after ``k`` steps.

    Maps every index ``1..span`` to the token stored there, or ``None`` for a
    hole (reserved or own positions not filled yet).
    """
    if not 0 <= k <= cfg.budget:
        raise ValueError(f"k={k} outside 0..{cfg.budget}")
    occupancy: dict[int, TokenCoordinate | None] = dict.fromkeys(range(1, cfg.span + 1))
    for i in range(cfg.prompt_len):
        occupancy[i + 1] = prompt_coord(i)
    for i in range(cfg.agent_prompt_len):
        occupancy[cfg.prompt_len + i + 1] = agent_prompt_coord(viewer, i)
    for m in range(1, cfg.n_agents + 1):
        for j in range(1, k + 1):
            if m == viewer:
                occupancy[assign_position_local(cfg, m, j)] = thought(m, j)
            else:
                occupancy[reserved_position_local(cfg, viewer, m, j)] = thought(m, j)
    return occupancy


@dataclass(frozen=True)
class Event:
    """One step of the generation procedure.

    ``prefill`` events write known tokens to the cache; ``generate`` events
    sample every listed coordinate simultaneously.
    """

    kind: str
    coords: tuple[TokenCoordinate, ...]

    def __str__(self) -> str:
        inner = ", ".join(map(str, self.coords))
        return f"{self.kind}[{inner}]"


def _agent_prompt(cfg: GroupConfig, n: int) -> tuple[TokenCoordinate, ...]:
    return tuple(agent_prompt_coord(n, i) for i in range(cfg.agent_prompt_len))


def generation_order(cfg: GroupConfig) -> list[Event]:
    events: list[Event] = []
    if cfg.prompt_len:
        events.append(Event("prefill", tuple(prompt_coord(i) for i in range(cfg.prompt_len))))
    agents = range(1, cfg.n_agents + 1)
    if cfg.mode is Mode.GROUP_THINK_INTERLEAVED:
        for k in range(1, cfg.budget + 1):
            for n in agents:
                if k == 1 and cfg.agent_prompt_len:
                    events.append(Event("prefill", _agent_prompt(cfg, n)))
                events.append(Event("generate", (thought(n, k),)))
        return events
    if cfg.agent_prompt_len:
        events.append(Event("prefill", tuple(c for n in agents for c in _agent_prompt(cfg, n))))
    for k in range(1, cfg.budget + 1):
        events.append(Event("generate", tuple(thought(n, k) for n in agents)))
    return events


def _lengths(cfg: GroupConfig, lengths: Mapping[int, int] | Sequence[int] | None, k: int | None) -> dict[int, int]:
    cap = cfg.budget if k is None else k
    if not 0 <= cap <= cfg.budget:
        raise ValueError(f"k={cap} outside 0..{cfg.budget}")
    if lengths is None:
        return {n: cap for n in range(1, cfg.n_agents + 1)}
    if isinstance(lengths, Mapping):
        items = dict(lengths)
    else:
        items = {n: int(v) for n, v in enumerate(lengths, start=1)}
    out = {}
    for n in range(1, cfg.n_agents + 1):
        value = items.get(n, cfg.budget)
        if not 0 <= value <= cfg.budget:
            raise ValueError(f"agent {n} length {value} outside 0..{cfg.budget}")
        out[n] = min(value, cap)
    return out


def timeline(cfg: GroupConfig, lengths=None, k: int | None = None) -> list[TokenCoordinate]:
    """Coordinates that exist after ``k`` steps, in generation (cache insertion) order."""
    caps = _lengths(cfg, lengths, k)
    return [
        c
        for event in generation_order(cfg)
        for c in event.coords
        if c.role is not Role.THOUGHT or c.step <= caps[c.agent]
    ]


def _exists(cfg: GroupConfig, coord: TokenCoordinate) -> bool:
    if coord.role is Role.PROMPT:
        return 0 <= coord.offset < cfg.prompt_len and coord.agent == 0 and coord.step == 0
    if not 1 <= coord.agent <= cfg.n_agents:
        return False
    if coord.role is Role.AGENT_PROMPT:
        return 0 <= coord.offset < cfg.agent_prompt_len and coord.step == 0
    if coord.role is Role.THOUGHT:
        return 1 <= coord.step <= cfg.budget and coord.offset == 0
    return False


@lru_cache(maxsize=1 << 16)
def _oracle(cfg: GroupConfig, coord: TokenCoordinate) -> frozenset[TokenCoordinate]:
    if not _exists(cfg, coord):
        raise ValueError(f"{coord} is not part of the timeline for {cfg}")
    P, K, N = cfg.prompt_len, cfg.budget, cfg.n_agents
    if coord.role is Role.PROMPT:
        return frozenset(prompt_coord(i) for i in range(coord.offset + 1))

    n = coord.agent
    seen = {prompt_coord(i) for i in range(P)}
    if coord.role is Role.AGENT_PROMPT:
        k = 0
        seen.update(agent_prompt_coord(n, i) for i in range(coord.offset + 1))
    else:
        k = coord.step
        seen.update(_agent_prompt(cfg, n))
        seen.update(thought(n, j) for j in range(1, k + 1))

    if cfg.mode is Mode.GROUP_THINK_LOCKSTEP:
        for m in range(1, N + 1):
            if m != n:
                seen.update(_agent_prompt(cfg, m))
                seen.update(thought(m, j) for j in range(1, k + 1))
    elif cfg.mode is Mode.GROUP_THINK_INTERLEAVED:
        for m in range(1, N + 1):
            if m == n:
                continue
            if k == 0:
                # agent prompts are prefilled just before the agent's first
                # token, after every earlier agent's first token
                if m < n:
                    seen.update(_agent_prompt(cfg, m))
                    seen.add(thought(m, 1))
                continue
            seen.update(_agent_prompt(cfg, m))
            seen.update(thought(m, j) for j in range(1, k + 1))
            if m < n and k + 1 <= K:
                seen.add(thought(m, k + 1))
    return frozenset(seen)


def visibility_oracle(
    cfg: GroupConfig,
    coord: TokenCoordinate,
    lengths=None,
    k: int | None = None,
) -> frozenset[TokenCoordinate]:
    """Set of tokens the row of ``coord`` may attend to (``coord`` included).

    The row of thought ``(n, k)`` is the query that produces ``(n, k + 1)``.
    It always covers the shared prompt, the agent's own agent-prompt and its
    own thoughts up to ``k``.  Group Think modes add every other agent's
    agent-prompt and thoughts up to ``k``; the interleaved mode further adds
    ``(m, k + 1)`` for every earlier agent ``m < n``, which was sampled
    within the same step.  Independent sampling and single CoT never see
    another agent.

    ``lengths`` (per-agent realized chain lengths) and ``k`` (truncation)
    remove tokens that were never generated.
    """
    full = _oracle(cfg, coord)
    if lengths is None and k is None:
        return full
    caps = _lengths(cfg, lengths, k)
    if coord.role is Role.THOUGHT and coord.step > caps[coord.agent]:
        raise ValueError(f"{coord} is beyond the realized chain of agent {coord.agent}")
    return frozenset(c for c in full if c.role is not Role.THOUGHT or c.step <= caps[c.agent])


@dataclass(frozen=True, eq=False)
class AttentionMask:
    """Boolean visibility matrix over a timeline of coordinates.

    ``matrix[i, j]`` is true when the row of ``coords[i]`` may attend to
    ``coords[j]``.  ``holes`` lists positions inside the layout span that hold
    no key/value entry.
    """

    coords: tuple[TokenCoordinate, ...]
    positions: tuple[int, ...]
    matrix: np.ndarray
    holes: tuple[int, ...] = ()
    config: GroupConfig | None = None
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = len(self.coords)
        if self.matrix.shape != (n, n) or self.matrix.dtype != bool:
            raise ValueError(f"mask matrix must be bool {n}x{n}, got {self.matrix.dtype} {self.matrix.shape}")
        if len(self.positions) != n:
            raise ValueError("positions and coords differ in length")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.coords)})
        if len(self._index) != n:
            raise ValueError("duplicate coordinates in mask timeline")

    def __len__(self) -> int:
        return len(self.coords)

    def index(self, coord: TokenCoordinate) -> int:
        return self._index[coord]

    def row(self, coord: TokenCoordinate) -> frozenset[TokenCoordinate]:
        cols = np.flatnonzero(self.matrix[self._index[coord]])
        return frozenset(self.coords[j] for j in cols)

    def restrict(self, coords: Iterable[TokenCoordinate]) -> AttentionMask:
        """Sub-mask over ``coords`` (kept in this mask's timeline order)."""
        idx = sorted(self._index[c] for c in coords)
        return AttentionMask(
            tuple(self.coords[i] for i in idx),
            tuple(self.positions[i] for i in idx),
            self.matrix[np.ix_(idx, idx)].copy(),
            config=self.config,
        )

    def to_json(self) -> dict:
        rows = []
        for i in range(len(self.coords)):
            value = 0
            for j in np.flatnonzero(self.matrix[i]):
                value |= 1 << int(j)
            rows.append(format(value, "x"))
        return {
            "config": self.config.to_dict() if self.config else None,
            "timeline": [
                {**c.to_dict(), "position": p} for c, p in zip(self.coords, self.positions)
            ],
            "holes": list(self.holes),
            "rows": rows,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)

    @classmethod
    def from_json(cls, d: Mapping) -> AttentionMask:
        coords = tuple(TokenCoordinate.from_dict(e) for e in d["timeline"])
        positions = tuple(int(e["position"]) for e in d["timeline"])
        n = len(coords)
        matrix = np.zeros((n, n), dtype=bool)
        for i, hexrow in enumerate(d["rows"]):
            value = int(hexrow, 16)
            if value >> n:
                raise ValueError(f"row {i} sets bits beyond the {n}-entry timeline")
            for j in range(n):
                matrix[i, j] = bool(value >> j & 1)
        cfg = GroupConfig.from_dict(d["config"]) if d.get("config") else None
        return cls(coords, positions, matrix, tuple(d.get("holes", ())), cfg)


def build_mask(cfg: GroupConfig, k: int | None = None, lengths=None) -> AttentionMask:
    """Realized mask after ``k`` steps per agent (full budget by default).

    Rows are obtained by replaying the generation order: a prefilled token
    sees everything already in the cache plus its own event (causally within
    its own agent), and thought ``(n, j)`` sees everything generated before
    the event that samples ``(n, j + 1)``.  Independent sampling and single
    CoT then drop other agents' tokens.
    """
    caps = _lengths(cfg, lengths, k)
    coords = timeline(cfg, caps)
    present = set(coords)
    index = {c: i for i, c in enumerate(coords)}
    matrix = np.zeros((len(coords), len(coords)), dtype=bool)
    isolated = not cfg.mode.is_group_think

    def assign(c: TokenCoordinate, visible: Iterable[TokenCoordinate]) -> None:
        row = matrix[index[c]]
        for v in visible:
            if isolated and v.agent not in (0, c.agent):
                continue
            row[index[v]] = True

    # plan one step past the budget so the last thought of every agent has a
    # (hypothetical) successor event to take its row from
    plan = generation_order(cfg.with_budget(cfg.budget + 1))
    generated: list[TokenCoordinate] = []
    last_of_agent: dict[int, TokenCoordinate] = {}
    for event in plan:
        if event.kind == "prefill":
            for c in event.coords:
                own = [e for e in event.coords if e.agent == c.agent and e.offset <= c.offset]
                others = [e for e in event.coords if e.agent != c.agent]
                assign(c, [*generated, *own, *others])
            generated.extend(event.coords)
            for c in event.coords:
                last_of_agent[c.agent] = c
            continue
        new = []
        for c in event.coords:
            query = thought(c.agent, c.step - 1) if c.step > 1 else last_of_agent.get(c.agent, last_of_agent.get(0))
            if query is not None and query.role is Role.THOUGHT and query in present:
                assign(query, [v for v in generated if v in present] + [query])
            if c in present:
                new.append(c)
        generated.extend(new)

    positions = tuple(position_of(cfg, c) for c in coords)
    holes = tuple(sorted(set(range(1, cfg.span + 1)) - set(positions)))
    return AttentionMask(tuple(coords), positions, matrix, holes, cfg)


def mask_from_oracle(cfg: GroupConfig, k: int | None = None, lengths=None) -> AttentionMask:
    """Mask whose rows are taken verbatim from :func:`visibility_oracle`."""
    caps = _lengths(cfg, lengths, k)
    coords = timeline(cfg, caps)
    index = {c: i for i, c in enumerate(coords)}
    matrix = np.zeros((len(coords), len(coords)), dtype=bool)
    for c in coords:
        for v in visibility_oracle(cfg, c, caps):
            matrix[index[c], index[v]] = True
    positions = tuple(position_of(cfg, c) for c in coords)
    holes = tuple(sorted(set(range(1, cfg.span + 1)) - set(positions)))
    return AttentionMask(tuple(coords), positions, matrix, holes, cfg)


def cache_realizable(cfg: GroupConfig) -> bool:
    """Whether every token's row is final at the time its key/value is written.

    Interleaved Group Think with several agents lets a row see same-step tokens
    of earlier agents, which in turn see the row's own token: the dependency
    runs forward in time, so the view has to be recomputed per query.
    """
    return not (cfg.mode is Mode.GROUP_THINK_INTERLEAVED and cfg.n_agents > 1)


def mask_conformance(mask: AttentionMask, cfg: GroupConfig | None = None) -> list[tuple[TokenCoordinate, frozenset, frozenset]]:
    """Rows whose permitted set differs from the oracle: ``(coord, extra, missing)``."""
    cfg = cfg or mask.config
    if cfg is None:
        raise ValueError("mask carries no configuration")
    present = set(mask.coords)
    caps = {n: 0 for n in range(1, cfg.n_agents + 1)}
    for c in mask.coords:
        if c.role is Role.THOUGHT:
            caps[c.agent] = max(caps[c.agent], c.step)
    failures = []
    for c in mask.coords:
        expected = visibility_oracle(cfg, c, caps) & present
        actual = mask.row(c)
        if expected != actual:
            failures.append((c, actual - expected, expected - actual))
    return failures

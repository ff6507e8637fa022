"""Two-phase concurrent decoding: N thinkers, then one answer.

The think phase walks the scheduler's generation order.  For every token to
generate, the engine builds the *view* the row of its query token is allowed
to see (the realized mask row, restricted to tokens that exist) and hands
only that view to the token source.  Sources either return logits, which the
engine samples, or a finished :class:`~groupthink.tokenizer.Token`.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .model import (
    KVCache,
    Model,
    NewToken,
    VisibilityError,
    causal_mask,
    forward_full,
    forward_incremental,
)
from .scheduler import (
    GroupConfig,
    Mode,
    Role,
    TokenCoordinate,
    agent_prompt_coord,
    build_mask,
    cache_realizable,
    generation_order,
    position_of,
    prompt_coord,
    thought,
)
from .tokenizer import Token


class ContextOverflowError(RuntimeError):
    pass


class SourceError(RuntimeError):
    """A token source failed to produce a token."""


# -- sampling ----------------------------------------------------------------


@dataclass(frozen=True)
class SamplerConfig:
    """Temperature sampling with one seeded stream per agent.

    Temperature 0 means greedy (first maximal index).  ``agent_seeds`` pins
    the stream of each agent explicitly; otherwise streams are spawned from
    ``seed`` by agent index.
    """

    temperature: float = 0.0
    seed: int = 0
    agent_seeds: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.temperature >= 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.agent_seeds is not None:
            object.__setattr__(self, "agent_seeds", tuple(int(s) for s in self.agent_seeds))

    def agent_rng(self, agent: int) -> np.random.Generator:
        if self.agent_seeds is not None:
            if not 1 <= agent <= len(self.agent_seeds):
                raise ValueError(f"no seed configured for agent {agent}")
            return np.random.default_rng(np.random.SeedSequence(self.agent_seeds[agent - 1]))
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(agent,)))

    def answer_rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(0,)))

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "seed": self.seed,
            "agent_seeds": list(self.agent_seeds) if self.agent_seeds is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> SamplerConfig:
        seeds = d.get("agent_seeds")
        return cls(float(d.get("temperature", 0.0)), int(d.get("seed", 0)), tuple(seeds) if seeds else None)


def sample(logits: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator) -> int:
    values = np.asarray(logits, dtype=np.float64).reshape(-1)
    if np.isnan(values).any() or np.isposinf(values).any():
        raise ValueError("logits must be finite or -inf")
    if not np.isfinite(values).any():
        raise ValueError("every logit is -inf")
    if sampler.temperature == 0:
        return int(np.argmax(values))
    z = values / sampler.temperature
    z -= z[np.isfinite(z)].max()
    cdf = np.cumsum(np.exp(z))
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), values.size - 1))


# -- what a source gets to see -------------------------------------------------


@dataclass(frozen=True)
class VisibleToken:
    coord: TokenCoordinate
    position: int
    token: Token


@dataclass(frozen=True, eq=False)
class Request:
    """Everything a source may read to produce ``target``.

    ``view`` lists the tokens visible to the query row (query included) in
    cache insertion order; ``mask`` is the realized mask restricted to them.
    ``query`` is ``None`` when nothing precedes the first token.
    """

    target: TokenCoordinate
    target_position: int
    query: TokenCoordinate | None
    view: tuple[VisibleToken, ...]
    mask: np.ndarray
    config: GroupConfig

    @property
    def query_index(self) -> int:
        for i, v in enumerate(self.view):
            if v.coord == self.query:
                return i
        raise LookupError("request has no query token")

    def chains(self) -> dict[int, list[str]]:
        """Visible thought texts per agent, in step order."""
        out: dict[int, list[tuple[int, str]]] = {}
        for v in self.view:
            if v.coord.role is Role.THOUGHT:
                out.setdefault(v.coord.agent, []).append((v.coord.step, v.token.text))
        return {a: [t for _, t in sorted(items)] for a, items in out.items()}

    def prompt_text(self) -> str:
        return "".join(v.token.text for v in self.view if v.coord.role is Role.PROMPT)


class TokenSource(Protocol):
    """Produces next tokens from the permitted view only.

    ``propose`` returns, per request, logits to sample from, a finished
    :class:`Token`, or ``None`` to stop that agent early.
    """

    def begin(self, cfg: GroupConfig) -> None: ...

    def propose(self, requests: Sequence[Request]) -> list[np.ndarray | Token | None]: ...

    def answer(
        self,
        context: Sequence[Token],
        budget: int,
        sampler: SamplerConfig,
        rng: np.random.Generator,
        end_token: int | None,
    ) -> list[Token]: ...


# -- toy model source ----------------------------------------------------------


class ModelSource:
    """Token source backed by the toy transformer.

    When every row is final at insertion time (see
    :func:`~groupthink.scheduler.cache_realizable`) tokens go through an
    incremental KV cache, one call per generation event, so tokens sampled
    together see each other.  Otherwise each query is recomputed with a full
    forward over its view.
    """

    def __init__(self, model: Model, tokenizer=None, *, strategy: str = "auto"):
        if strategy not in ("auto", "cache", "recompute"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.model = model
        self.tokenizer = tokenizer
        self.strategy = strategy
        self.use_cache = True
        self.cache = KVCache.for_model(model)
        self._row_logits: dict[TokenCoordinate, np.ndarray] = {}
        self._rows: dict[TokenCoordinate, frozenset] = {}

    def begin(self, cfg: GroupConfig) -> None:
        if self.strategy == "cache" and not cache_realizable(cfg):
            raise ValueError(f"{cfg.mode.value} with {cfg.n_agents} agents cannot be served from a KV cache")
        self.use_cache = self.strategy == "cache" or (self.strategy == "auto" and cache_realizable(cfg))
        self.cache = KVCache.for_model(self.model)
        self._row_logits.clear()
        self._rows.clear()

    def _token(self, i: int) -> Token:
        if self.tokenizer is not None:
            return self.tokenizer.token(i)
        return Token(i, "")

    def propose(self, requests: Sequence[Request]) -> list[np.ndarray]:
        for r in requests:
            if r.query is None:
                raise SourceError(f"{r.target} has no preceding token to condition on")
            top = max(v.position for v in r.view)
            if r.target_position > self.model.config.context_length or top > self.model.config.context_length:
                raise ContextOverflowError(
                    f"position {r.target_position} exceeds context length {self.model.config.context_length}"
                )
        if not self.use_cache:
            out = []
            for r in requests:
                logits = forward_full(
                    self.model,
                    [v.token.id for v in r.view],
                    [v.position for v in r.view],
                    r.mask,
                )
                out.append(logits[r.query_index])
            return out

        pending: dict[TokenCoordinate, tuple[NewToken, frozenset]] = {}
        for r in requests:
            coords = [v.coord for v in r.view]
            for i, v in enumerate(r.view):
                row = frozenset(coords[j] for j in np.flatnonzero(r.mask[i]))
                if v.coord in self.cache or v.coord in pending:
                    known = self._rows.get(v.coord) or pending[v.coord][1]
                    if known != row:
                        raise VisibilityError(f"row of {v.coord} changed after its key/value was written")
                    continue
                pending[v.coord] = (NewToken(v.token.id, v.position, v.coord), row)
        if pending:
            new = [t for t, _ in pending.values()]
            visible = [row for _, row in pending.values()]
            logits, self.cache = forward_incremental(self.model, self.cache, new, visible)
            for (coord, (_, row)), lg in zip(pending.items(), logits):
                self._row_logits[coord] = lg
                self._rows[coord] = row
        return [self._row_logits[r.query] for r in requests]

    def answer(self, context, budget, sampler, rng, end_token) -> list[Token]:
        if not context:
            raise SourceError("answer phase needs at least one context token")
        total = len(context) + budget
        if total > self.model.config.context_length:
            raise ContextOverflowError(f"answer layout needs {total} positions")
        coords = [TokenCoordinate(0, 0, Role.ANSWER, i) for i in range(len(context))]
        new = [NewToken(t.id, i + 1, c) for i, (t, c) in enumerate(zip(context, coords))]
        visible = [coords[: i + 1] for i in range(len(coords))]
        cache = KVCache.for_model(self.model)
        logits, cache = forward_incremental(self.model, cache, new, visible)
        last = logits[-1]
        out: list[Token] = []
        history = list(coords)
        for j in range(1, budget + 1):
            tok = self._token(sample(last, sampler, rng))
            out.append(tok)
            if end_token is not None and tok.id == end_token:
                break
            if j == budget:
                break
            c = TokenCoordinate(0, j, Role.ANSWER)
            history.append(c)
            logits, cache = forward_incremental(
                self.model, cache, [NewToken(tok.id, len(context) + j, c)], [history]
            )
            last = logits[-1]
        return out


# -- scripted source -------------------------------------------------------------


class ScriptError(VisibilityError):
    """A script asked for tokens outside its permitted view."""


@dataclass
class ScriptContext:
    agent: int
    step: int
    prompt: str
    rng: np.random.Generator
    _chains: dict[int, list[str]]

    @property
    def visible_agents(self) -> list[int]:
        return sorted(self._chains)

    def chain(self, agent: int) -> list[str]:
        if agent not in self._chains:
            raise ScriptError(f"agent {self.agent} cannot see agent {agent}")
        return list(self._chains[agent])

    @property
    def own(self) -> list[str]:
        return self.chain(self.agent)

    def visible_tokens(self) -> list[str]:
        return [t for a in self.visible_agents for t in self._chains[a]]


Program = Callable[[ScriptContext], "str | None"]


class ScriptedSource:
    """Deterministic source driven by per-agent programs.

    A program is either a list of token texts (emitted in order, stopping when
    exhausted) or a callable receiving a :class:`ScriptContext` and returning
    the next token text, or ``None`` to stop.
    """

    def __init__(
        self,
        programs: Mapping[int, Program | Sequence[str]],
        *,
        answer: str | Callable[[str], str] = "",
        seed: int = 0,
    ):
        self.programs = {int(a): p for a, p in programs.items()}
        self.answer_script = answer
        self.seed = seed
        self._vocab: dict[str, int] = {}
        self._rngs: dict[int, np.random.Generator] = {}
        self.cfg: GroupConfig | None = None

    def begin(self, cfg: GroupConfig) -> None:
        missing = [n for n in range(1, cfg.n_agents + 1) if n not in self.programs]
        if missing:
            raise ValueError(f"no script for agents {missing}")
        self.cfg = cfg
        self._rngs = {
            n: np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(n,)))
            for n in range(1, cfg.n_agents + 1)
        }

    def _token(self, text: str) -> Token:
        return Token(self._vocab.setdefault(text, len(self._vocab)), text)

    def propose(self, requests: Sequence[Request]) -> list[Token | None]:
        out = []
        for r in requests:
            n, k = r.target.agent, r.target.step
            chains = r.chains()
            chains.setdefault(n, [])
            if r.config.mode.is_group_think:
                for m in range(1, r.config.n_agents + 1):
                    chains.setdefault(m, [])
            program = self.programs[n]
            if callable(program):
                ctx = ScriptContext(n, k, r.prompt_text(), self._rngs[n], chains)
                text = program(ctx)
            else:
                text = program[k - 1] if k <= len(program) else None
            out.append(None if text is None else self._token(text))
        return out

    def answer(self, context, budget, sampler, rng, end_token) -> list[Token]:
        script = self.answer_script
        text = script("".join(t.text for t in context)) if callable(script) else script
        return [self._token(text)][:budget] if text else []


# -- transcripts -----------------------------------------------------------------


@dataclass(frozen=True)
class TranscriptEvent:
    agent: int
    step: int
    position: int
    token_id: int
    text: str

    @property
    def coord(self) -> TokenCoordinate:
        return thought(self.agent, self.step)

    def to_dict(self) -> dict:
        return {
            "type": "event",
            "agent": self.agent,
            "step": self.step,
            "position": self.position,
            "token_id": self.token_id,
            "text": self.text,
        }


@dataclass
class Transcript:
    config: GroupConfig
    sampler: SamplerConfig
    prompt: list[Token]
    agent_prompts: list[list[Token]]
    events: list[TranscriptEvent] = field(default_factory=list)
    answer: list[Token] = field(default_factory=list)
    model_checksum: str | None = None
    source: str | None = None
    timestamp: str | None = None
    logits: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    def chain(self, agent: int, k: int | None = None) -> list[TranscriptEvent]:
        return [e for e in self.events if e.agent == agent and (k is None or e.step <= k)]

    def chain_text(self, agent: int, k: int | None = None) -> str:
        return "".join(e.text for e in self.chain(agent, k))

    def agent_texts(self, k: int | None = None) -> list[str]:
        return [self.chain_text(n, k) for n in range(1, self.config.n_agents + 1)]

    def lengths(self) -> dict[int, int]:
        out = {n: 0 for n in range(1, self.config.n_agents + 1)}
        for e in self.events:
            out[e.agent] = max(out[e.agent], e.step)
        return out

    @property
    def latency_tokens(self) -> int:
        """Per-thinker latency: length of the longest chain, not the total."""
        return max(self.lengths().values(), default=0)

    @property
    def total_tokens(self) -> int:
        return len(self.events)

    def to_records(self) -> list[dict]:
        header = {
            "type": "header",
            "config": self.config.to_dict(),
            "sampler": self.sampler.to_dict(),
            "model_checksum": self.model_checksum,
            "source": self.source,
            "prompt": [[t.id, t.text] for t in self.prompt],
            "agent_prompts": [[[t.id, t.text] for t in ap] for ap in self.agent_prompts],
        }
        if self.timestamp is not None:
            header["timestamp"] = self.timestamp
        answer = {
            "type": "answer",
            "token_ids": [t.id for t in self.answer],
            "text": "".join(t.text for t in self.answer),
            "tokens": [t.text for t in self.answer],
        }
        return [header, *(e.to_dict() for e in self.events), answer]

    def dumps(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in self.to_records())

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> Transcript:
        records = [json.loads(line) for line in text.split("\n") if line.strip()]
        if not records or records[0].get("type") != "header":
            raise ValueError("transcript must start with a header record")
        head = records[0]
        transcript = cls(
            config=GroupConfig.from_dict(head["config"]),
            sampler=SamplerConfig.from_dict(head["sampler"]),
            prompt=[Token(int(i), t) for i, t in head.get("prompt", [])],
            agent_prompts=[[Token(int(i), t) for i, t in ap] for ap in head.get("agent_prompts", [])],
            model_checksum=head.get("model_checksum"),
            source=head.get("source"),
            timestamp=head.get("timestamp"),
        )
        for r in records[1:]:
            if r["type"] == "event":
                transcript.events.append(
                    TranscriptEvent(int(r["agent"]), int(r["step"]), int(r["position"]), int(r["token_id"]), r["text"])
                )
            elif r["type"] == "answer":
                texts = r.get("tokens") or [r.get("text", "")] * bool(r["token_ids"])
                transcript.answer = [Token(int(i), t) for i, t in zip(r["token_ids"], texts)]
            else:
                raise ValueError(f"unknown record type {r['type']!r}")
        return transcript

    @classmethod
    def read(cls, path: str | Path) -> Transcript:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


# -- the two phases ----------------------------------------------------------------


def _as_tokens(seq) -> list[Token]:
    return [t if isinstance(t, Token) else Token(int(t), "") for t in seq]


def query_for(cfg: GroupConfig, target: TokenCoordinate) -> TokenCoordinate | None:
    """Token whose row produces ``target``: the agent's previous thought, else
    the last agent-prompt token, else the last prompt token."""
    if target.step > 1:
        return thought(target.agent, target.step - 1)
    if cfg.agent_prompt_len:
        return agent_prompt_coord(target.agent, cfg.agent_prompt_len - 1)
    if cfg.prompt_len:
        return prompt_coord(cfg.prompt_len - 1)
    return None


def run_think_phase(
    cfg: GroupConfig,
    source: TokenSource,
    prompt: Sequence[Token | int],
    sampler: SamplerConfig,
    agent_prompts: Sequence[Sequence[Token | int]] | None = None,
    *,
    end_token: int | None = None,
    record_logits: bool = False,
    model_checksum: str | None = None,
) -> Transcript:
    prompt = _as_tokens(prompt)
    if len(prompt) != cfg.prompt_len:
        raise ValueError(f"prompt has {len(prompt)} tokens but the config declares {cfg.prompt_len}")
    if agent_prompts is None:
        if cfg.agent_prompt_len:
            raise ValueError("agent prompts are required when agent_prompt_len > 0")
        agent_prompts = [[] for _ in range(cfg.n_agents)]
    agent_prompts = [_as_tokens(ap) for ap in agent_prompts]
    if len(agent_prompts) != cfg.n_agents or any(len(ap) != cfg.agent_prompt_len for ap in agent_prompts):
        raise ValueError(f"need {cfg.n_agents} agent prompts of {cfg.agent_prompt_len} tokens each")

    plan = build_mask(cfg)
    order = {c: i for i, c in enumerate(plan.coords)}
    known: dict[TokenCoordinate, VisibleToken] = {}
    frozen: set[int] = set()
    rngs = {n: sampler.agent_rng(n) for n in range(1, cfg.n_agents + 1)}
    transcript = Transcript(cfg, sampler, prompt, agent_prompts, model_checksum=model_checksum)
    if record_logits:
        transcript.logits = []
    source.begin(cfg)

    def fixed_token(c: TokenCoordinate) -> Token:
        if c.role is Role.PROMPT:
            return prompt[c.offset]
        return agent_prompts[c.agent - 1][c.offset]

    for event in generation_order(cfg):
        if event.kind == "prefill":
            for c in event.coords:
                known[c] = VisibleToken(c, position_of(cfg, c), fixed_token(c))
            continue
        active = [c for c in event.coords if c.agent not in frozen]
        if not active:
            continue
        requests = []
        for c in active:
            q = query_for(cfg, c)
            if q is None:
                view: tuple[VisibleToken, ...] = ()
                sub = np.zeros((0, 0), dtype=bool)
            else:
                row = plan.matrix[order[q]]
                idx = [j for j in np.flatnonzero(row) if plan.coords[j] in known]
                view = tuple(known[plan.coords[j]] for j in idx)
                sub = plan.matrix[np.ix_(idx, idx)]
            requests.append(Request(c, position_of(cfg, c), q, view, sub, cfg))
        proposals = source.propose(requests)
        if len(proposals) != len(requests):
            raise SourceError(f"source answered {len(proposals)} of {len(requests)} requests")
        fresh = []
        for c, proposal in zip(active, proposals):
            if proposal is None:
                frozen.add(c.agent)
                continue
            if isinstance(proposal, Token):
                tok = proposal
            else:
                if record_logits:
                    transcript.logits.append(np.array(proposal, copy=True))
                tok = _decode(source, sample(proposal, sampler, rngs[c.agent]))
            pos = position_of(cfg, c)
            transcript.events.append(TranscriptEvent(c.agent, c.step, pos, tok.id, tok.text))
            fresh.append(VisibleToken(c, pos, tok))
            if end_token is not None and tok.id == end_token:
                frozen.add(c.agent)
        # tokens of one event become visible together, after all were sampled
        for v in fresh:
            known[v.coord] = v
    return transcript


def _decode(source, token_id: int) -> Token:
    tokenizer = getattr(source, "tokenizer", None)
    if tokenizer is not None:
        return tokenizer.token(token_id)
    return Token(token_id, "")


def answer_context(
    transcript: Transcript,
    *,
    answer_header: Sequence[Token] = (),
    agent_headers: Sequence[Sequence[Token]] | None = None,
) -> list[Token]:
    """Prompt, then every chain in agent order behind its header, then the answer header."""
    cfg = transcript.config
    headers = agent_headers if agent_headers is not None else transcript.agent_prompts
    if len(headers) != cfg.n_agents:
        raise ValueError(f"need {cfg.n_agents} agent headers, got {len(headers)}")
    context = list(transcript.prompt)
    for n in range(1, cfg.n_agents + 1):
        context.extend(_as_tokens(headers[n - 1]))
        context.extend(Token(e.token_id, e.text) for e in transcript.chain(n))
    context.extend(_as_tokens(answer_header))
    return context


def run_answer_phase(
    cfg: GroupConfig,
    source: TokenSource,
    transcript: Transcript,
    sampler: SamplerConfig,
    answer_budget: int,
    *,
    answer_header: Sequence[Token] = (),
    agent_headers: Sequence[Sequence[Token]] | None = None,
    end_token: int | None = None,
) -> list[Token]:
    if answer_budget < 0:
        raise ValueError("answer_budget must be >= 0")
    if transcript.config != cfg:
        raise ValueError("transcript was produced under a different configuration")
    context = answer_context(transcript, answer_header=answer_header, agent_headers=agent_headers)
    if answer_budget == 0:
        return []
    return source.answer(context, answer_budget, sampler, sampler.answer_rng(), end_token)


def reference_answer(model: Model, context: Sequence[Token], budget: int, end_token: int | None = None) -> list[int]:
    """Greedy answer by repeated full forwards over the concatenated layout."""
    ids = [t.id for t in context]
    out: list[int] = []
    for _ in range(budget):
        logits = forward_full(model, ids, range(1, len(ids) + 1), causal_mask(len(ids)))
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        if end_token is not None and nxt == end_token:
            break
        ids.append(nxt)
    return out


MODE_NAMES = {m.short: m for m in Mode}

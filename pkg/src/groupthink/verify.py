"""Invariant suite behind ``groupthink verify``."""

from __future__ import annotations

import heapq
import itertools
import json
import time
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import (
    ModelSource,
    SamplerConfig,
    ScriptedSource,
    Transcript,
    answer_context,
    query_for,
    reference_answer,
    run_answer_phase,
    run_think_phase,
)
from .evaluation import (
    EXAMPLE_GRAPH,
    EnumerationTask,
    FloydWarshallTask,
    RegisterEntry,
    WeightedGraph,
    coverage_enumeration,
    coverage_fw,
    floyd_warshall,
    fw_step_oracle,
)
from .latency import HardwareProfile, crossover_batch, step_latency, total_latency
from .model import (
    KVCache,
    Model,
    ModelConfig,
    NewToken,
    forward_full,
    forward_incremental,
    init_model,
    max_relative_error,
)
from .scheduler import (
    AttentionMask,
    GroupConfig,
    Layout,
    Mode,
    Role,
    TokenCoordinate,
    assign_position_local,
    assign_slots_interleaved,
    build_mask,
    generation_order,
    mask_conformance,
    mask_from_oracle,
    position_of,
    thought,
    timeline,
)
from .scripts import disjoint, item_pool
from .tokenizer import ByteTokenizer

REL_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    cases: int
    failures: list[str] = field(default_factory=list)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name} ({self.cases} cases, {self.seconds:.2f}s)"
        if self.failures:
            text += f": {len(self.failures)} failing; first: {self.failures[0]}"
        return text


@dataclass
class Counter:
    cases: int = 0
    failures: list[str] = field(default_factory=list)

    def check(self, ok: bool, detail: str | Callable[[], str]) -> None:
        self.cases += 1
        if not ok:
            self.failures.append(detail() if callable(detail) else detail)


# -- mask checks ----------------------------------------------------------------


def mask_grid(
    ns=range(1, 5), ks=range(1, 17), prompt_lens=(0, 1, 8), agent_prompt_lens=(0, 2)
) -> Iterator[GroupConfig]:
    for mode in Mode:
        for n, k, p, ap in itertools.product(ns, ks, prompt_lens, agent_prompt_lens):
            if mode is Mode.SINGLE_COT and n != 1:
                continue
            yield GroupConfig(n, k, mode, p, ap)


def check_mask_conformance(c: Counter, configs=None) -> None:
    for cfg in configs or mask_grid():
        for k in sorted({0, 1, cfg.budget // 2, cfg.budget}):
            bad = mask_conformance(build_mask(cfg, k=k), cfg)
            c.check(not bad, lambda: f"{cfg} k={k}: row {bad[0][0]} extra={sorted(map(str, bad[0][1]))} missing={sorted(map(str, bad[0][2]))}")


def check_interleaved_within_step(c: Counter) -> None:
    for n_agents, budget, p in itertools.product(range(2, 5), (1, 3, 6), (0, 1, 8)):
        cfg = GroupConfig(n_agents, budget, Mode.GROUP_THINK_INTERLEAVED, p, 2)
        mask = build_mask(cfg)
        for n in range(2, n_agents + 1):
            for k in range(1, budget):
                row = mask.row(thought(n, k))
                want = {thought(m, k + 1) for m in range(1, n)}
                later = {thought(m, k + 1) for m in range(n + 1, n_agents + 1)}
                c.check(want <= row and not later & row, f"{cfg}: row ({n},{k}) lacks same-step tokens of earlier agents")


def check_mask_file(c: Counter, path: Path) -> None:
    mask = AttentionMask.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    if mask.config is None:
        c.check(False, f"{path}: mask file carries no config")
        return
    bad = mask_conformance(mask, mask.config)
    for coord, extra, missing in bad:
        c.check(False, f"{path}: row {coord} extra={sorted(map(str, extra))} missing={sorted(map(str, missing))}")
    c.cases += len(mask) - len(bad)


# -- layout checks ----------------------------------------------------------------


def check_slot_example(c: Counter) -> None:
    cfg = GroupConfig(2, 50, Mode.GROUP_THINK_INTERLEAVED, 100, 10)
    slots = assign_slots_interleaved(cfg)
    outs = [[position_of(cfg, thought(n, k)) for k in range(1, 51)] for n in (1, 2)]
    c.check(outs[0] == list(range(111, 161)), f"agent 1 outputs {outs[0][0]}..{outs[0][-1]}")
    c.check(outs[1] == list(range(171, 221)), f"agent 2 outputs {outs[1][0]}..{outs[1][-1]}")
    c.check([s.first_position for s in slots] == [101, 161], f"slot starts {[s.first_position for s in slots]}")


def check_local_formula(c: Counter) -> None:
    for n_agents, budget in itertools.product(range(1, 9), range(1, 65)):
        cfg = GroupConfig(n_agents, budget, Mode.GROUP_THINK_LOCKSTEP, 7, 3)
        ok = all(
            assign_position_local(cfg, n, k) == 7 + 3 + budget * (n_agents - 1) + k
            for n in range(1, n_agents + 1)
            for k in range(1, budget + 1)
        )
        c.check(ok, f"N={n_agents} K={budget}")


def check_positions_unique(c: Counter) -> None:
    for cfg in mask_grid(ks=(1, 4, 9), prompt_lens=(0, 3)):
        coords = timeline(cfg)
        positions = [position_of(cfg, x) for x in coords]
        if cfg.effective_layout is not Layout.SLOTS:
            # local and contiguous layouts index each agent's sequence separately
            keyed = {(x.agent if x.role is not Role.PROMPT else 0, p) for x, p in zip(coords, positions)}
            c.check(len(keyed) == len(coords), f"{cfg}: positions collide within an agent")
        else:
            c.check(len(set(positions)) == len(positions), f"{cfg}: positions collide")
        c.check(all(1 <= p <= cfg.span for p in positions), f"{cfg}: position outside 1..span")


# -- model / engine checks -----------------------------------------------------------


def toy_model(seed: int = 0) -> Model:
    return init_model(ModelConfig(num_layers=2, num_heads=2, head_dim=8, seed=seed))


def _prompt(tok: ByteTokenizer, text: str) -> list:
    return [tok.token(tok.BOS), *tok.tokens(text)]


def run_toy(
    model: Model,
    mode: Mode,
    n_agents: int,
    budget: int,
    seed: int,
    *,
    temperature: float = 0.8,
    prompt: str = "Name fruits:",
    record_logits: bool = False,
) -> Transcript:
    tok = ByteTokenizer()
    p = _prompt(tok, prompt)
    aps = [tok.fit(f"T{n}:", 3) for n in range(1, n_agents + 1)]
    cfg = GroupConfig(n_agents, budget, mode, len(p), 3)
    return run_think_phase(
        cfg,
        ModelSource(model, tok),
        p,
        SamplerConfig(temperature, seed),
        aps,
        record_logits=record_logits,
    )


def check_reduction(c: Counter, seeds=range(5), budget: int = 6) -> None:
    model = toy_model(3)
    for seed in seeds:
        runs = {m: run_toy(model, m, 1, budget, seed) for m in Mode}
        ids = {m: [(e.agent, e.step, e.position, e.token_id) for e in t.events] for m, t in runs.items()}
        ref = ids[Mode.SINGLE_COT]
        c.check(all(v == ref for v in ids.values()), f"seed {seed}: N=1 transcripts differ across modes")


def random_realizable_case(rng: np.random.Generator):
    """Random model, tokens, positions and a mask realizable in insertion order.

    Returns ``(model, tokens, positions, chunks, mask)`` where ``chunks`` lists
    index groups inserted together and ``mask`` rows only reference earlier
    chunks or the row's own chunk.
    """
    cfg = ModelConfig(
        num_layers=int(rng.integers(1, 3)),
        num_heads=int(rng.integers(1, 4)),
        head_dim=int(rng.choice([4, 8])),
        seed=int(rng.integers(1 << 31)),
    )
    model = init_model(cfg)
    if rng.random() < 0.5:
        n = int(rng.integers(1, 65))
        positions = rng.permutation(np.arange(1, 2 * n + 1))[:n]
        chunks, start = [], 0
        while start < n:
            size = int(rng.integers(1, 5))
            chunks.append(list(range(start, min(n, start + size))))
            start += size
        mask = np.zeros((n, n), dtype=bool)
        for chunk in chunks:
            limit = chunk[-1] + 1
            for i in chunk:
                mask[i, :limit] = rng.random(limit) < 0.6
                mask[i, i] = True
    else:
        mode = Mode(rng.choice([Mode.GROUP_THINK_LOCKSTEP.value, Mode.INDEPENDENT_SAMPLING.value]))
        layout = Layout(rng.choice([Layout.SLOTS.value, Layout.LOCAL.value, Layout.CONTIGUOUS.value]))
        while True:
            group = GroupConfig(
                int(rng.integers(1, 5)), int(rng.integers(1, 9)), mode, int(rng.integers(0, 6)), int(rng.integers(0, 3)), layout
            )
            if len(timeline(group)) <= 64 and len(timeline(group)) > 0:
                break
        built = build_mask(group)
        index = {x: i for i, x in enumerate(built.coords)}
        chunks = [[index[x] for x in ev.coords] for ev in generation_order(group)]
        positions = np.array(built.positions)
        mask = built.matrix
        n = len(built.coords)
    tokens = rng.integers(0, cfg.vocab_size, size=n)
    return model, tokens, positions, chunks, mask


def incremental_logits(model: Model, tokens, positions, chunks, mask) -> np.ndarray:
    coords = [TokenCoordinate(1, i + 1, Role.THOUGHT) for i in range(len(tokens))]
    cache = KVCache.for_model(model)
    out = np.zeros((len(tokens), model.config.vocab_size), dtype=np.float32)
    for chunk in chunks:
        new = [NewToken(int(tokens[i]), int(positions[i]), coords[i]) for i in chunk]
        visible = [[coords[j] for j in np.flatnonzero(mask[i])] for i in chunk]
        logits, cache = forward_incremental(model, cache, new, visible)
        out[chunk] = logits
    return out


def check_equivalence(c: Counter, cases: int = 50, seed: int = 1234) -> None:
    rng = np.random.default_rng(seed)
    for case in range(cases):
        model, tokens, positions, chunks, mask = random_realizable_case(rng)
        inc = incremental_logits(model, tokens, positions, chunks, mask)
        full = forward_full(model, tokens, positions, mask)
        err = max_relative_error(inc, full)
        c.check(err <= REL_TOL, f"case {case}: relative error {err:.2e}")


def conditioning_errors(model: Model, transcript: Transcript) -> list[float]:
    """Relative error of each recorded logit row against a full recompute
    over exactly the oracle-visible tokens of its query."""
    cfg = transcript.config
    lengths = transcript.lengths()
    oracle_mask = mask_from_oracle(cfg, lengths=lengths)
    tokens = {}
    for i, t in enumerate(transcript.prompt):
        tokens[TokenCoordinate(0, 0, Role.PROMPT, i)] = t.id
    for n, ap in enumerate(transcript.agent_prompts, start=1):
        for i, t in enumerate(ap):
            tokens[TokenCoordinate(n, 0, Role.AGENT_PROMPT, i)] = t.id
    for e in transcript.events:
        tokens[e.coord] = e.token_id
    errors = []
    for e, logits in zip(transcript.events, transcript.logits or []):
        q = query_for(cfg, e.coord)
        sub = oracle_mask.restrict(oracle_mask.row(q))
        full = forward_full(model, [tokens[x] for x in sub.coords], sub.positions, sub.matrix)
        errors.append(max_relative_error(logits, full[sub.index(q)]))
    return errors


def check_conditioning(c: Counter, seeds=range(2)) -> None:
    model = toy_model(5)
    for mode, n_agents, seed in itertools.product(Mode, (1, 3), seeds):
        if mode is Mode.SINGLE_COT and n_agents != 1:
            continue
        t = run_toy(model, mode, n_agents, 5, seed, record_logits=True)
        errs = conditioning_errors(model, t)
        worst = max(errs, default=0.0)
        c.check(len(errs) == len(t.events) and worst <= REL_TOL, f"{mode.value} N={n_agents} seed {seed}: max error {worst:.2e}")


def check_answer_phase(c: Counter) -> None:
    model = toy_model(7)
    tok = ByteTokenizer()
    for mode in (Mode.GROUP_THINK_LOCKSTEP, Mode.GROUP_THINK_INTERLEAVED, Mode.INDEPENDENT_SAMPLING):
        t = run_toy(model, mode, 2, 4, 11)
        header = tok.tokens("\nA:")
        got = run_answer_phase(t.config, ModelSource(model, tok), t, SamplerConfig(0.0, 0), 6, answer_header=header)
        want = reference_answer(model, answer_context(t, answer_header=header), 6)
        c.check([x.id for x in got] == want, f"{mode.value}: answer differs from full recompute")


def check_replay(c: Counter) -> None:
    model = toy_model(2)
    for mode in Mode:
        n = 1 if mode is Mode.SINGLE_COT else 2
        a = run_toy(model, mode, n, 5, 9)
        b = run_toy(model, mode, n, 5, 9)
        c.check(a.dumps() == b.dumps(), f"{mode.value}: reruns differ")
        c.check(Transcript.loads(a.dumps()).dumps() == a.dumps(), f"{mode.value}: JSONL round trip differs")
        expected = [position_of(a.config, e.coord) for e in a.events]
        c.check([e.position for e in a.events] == expected, f"{mode.value}: event positions disagree with the layout")


def check_latency_accounting(c: Counter) -> None:
    def stopper(limit):
        return lambda ctx: "x" if ctx.step <= limit else None

    for limits in ((3, 5), (5, 1, 2), (4,)):
        n = len(limits)
        cfg = GroupConfig(n, 6, Mode.GROUP_THINK_LOCKSTEP)
        src = ScriptedSource({i + 1: stopper(lim) for i, lim in enumerate(limits)})
        t = run_think_phase(cfg, src, [], SamplerConfig())
        c.check(t.latency_tokens == max(limits), f"limits {limits}: latency {t.latency_tokens}")
        c.check(t.total_tokens == sum(limits), f"limits {limits}: total {t.total_tokens}")


# -- evaluation checks ----------------------------------------------------------------


def dijkstra_all_pairs(weights: np.ndarray) -> np.ndarray:
    n = weights.shape[0]
    out = np.full((n, n), np.inf)
    for s in range(n):
        dist = [np.inf] * n
        dist[s] = 0.0
        heap = [(0.0, s)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for v in range(n):
                w = weights[u, v]
                if v != u and np.isfinite(w) and d + w < dist[v]:
                    dist[v] = d + w
                    heapq.heappush(heap, (dist[v], v))
        out[s] = dist
    return out


def random_graph(rng: np.random.Generator, max_nodes: int = 6) -> WeightedGraph:
    n = int(rng.integers(1, max_nodes + 1))
    w = rng.integers(0, 10, size=(n, n)).astype(float)
    w[rng.random((n, n)) < 0.4] = np.inf
    np.fill_diagonal(w, 0.0)
    return WeightedGraph(w)


def check_fw(c: Counter, graphs: int = 100, seed: int = 99) -> None:
    rng = np.random.default_rng(seed)
    for g in range(graphs):
        graph = random_graph(rng)
        got = floyd_warshall(graph)
        c.check(np.array_equal(got, dijkstra_all_pairs(graph.weights)), f"graph {g}: disagrees with Dijkstra")
        n = graph.size
        tri = all(got[i, j] <= got[i, k] + got[k, j] for i in range(n) for j in range(n) for k in range(n))
        c.check(tri and (got <= graph.weights).all(), f"graph {g}: triangle inequality or upper bound broken")
    e = WeightedGraph.from_rows(EXAMPLE_GRAPH).weights
    step = fw_step_oracle(e, 0)
    for i, j in itertools.product(range(5), repeat=2):
        c.check(step[i, j] == min(e[i, j], e[i, 0] + e[0, j]), f"example graph k=0 entry ({i},{j})")
    c.check(step[2, 1] == 6 and step[4, 1] == 5, "example graph entries (2,1)=6 and (4,1)=5")


def check_analytic_curves(c: Counter, budget: int = 128, target: int = 100) -> None:
    task = EnumerationTask("", target)
    pool = item_pool(4 * budget + 8)
    for n in (1, 2, 4):
        cfg = GroupConfig(n, budget, Mode.GROUP_THINK_LOCKSTEP)
        t = run_think_phase(cfg, ScriptedSource(disjoint(pool, n)), [], SamplerConfig())
        for k in range(budget + 1):
            got = task.score(t.agent_texts(k))
            c.check(got == min(1.0, n * k / target), f"N={n} k={k}: coverage {got}")


def check_coverage_properties(c: Counter, transcripts: int = 200, seed: int = 5) -> None:
    rng = np.random.default_rng(seed)
    fw = FloydWarshallTask(WeightedGraph.from_rows(EXAMPLE_GRAPH))
    oracle = fw.oracle
    pool = item_pool(40)
    for r in range(transcripts):
        n, k = int(rng.integers(1, 5)), int(rng.integers(1, 30))
        target = int(rng.integers(1, 40))
        chains = [[pool[int(x)] for x in rng.integers(len(pool), size=k)] for _ in range(n)]
        values = [coverage_enumeration(["\n".join(ch[:j]) for ch in chains], target) for j in range(k + 1)]
        c.check(all(0 <= v <= 1 for v in values) and all(a <= b for a, b in zip(values, values[1:])), f"transcript {r}: enumeration not monotone/bounded")
        distinct = len({x for ch in chains for x in ch})
        c.check(distinct < target or values[-1] == 1.0, f"transcript {r}: cap does not bind")
        entries = [
            [RegisterEntry(int(i), int(j), float(oracle[i, j]) if rng.random() < 0.5 else float(rng.integers(0, 12))) for i, j in rng.integers(5, size=(k, 2))]
            for _ in range(n)
        ]
        fw_values = [coverage_fw([e for ch in entries for e in ch[:j]], oracle) for j in range(k + 1)]
        c.check(all(0 <= v <= 1 for v in fw_values) and all(a <= b for a, b in zip(fw_values, fw_values[1:])), f"transcript {r}: FW coverage not monotone/bounded")


# -- latency checks ----------------------------------------------------------------


def random_profile(rng: np.random.Generator) -> HardwareProfile:
    return HardwareProfile(
        mem_bandwidth=float(10 ** rng.uniform(10, 13)),
        compute=float(10 ** rng.uniform(12, 15)),
        weight_bytes=float(10 ** rng.uniform(8, 11)),
        flops_per_token=float(10 ** rng.uniform(8, 11)),
    )


def check_latency(c: Counter, profiles: int = 100, seed: int = 17) -> None:
    example = HardwareProfile(mem_bandwidth=1e12, compute=1e14, weight_bytes=16e9, flops_per_token=32e9)
    c.check(crossover_batch(example) == 50, f"example crossover {crossover_batch(example)}")
    rng = np.random.default_rng(seed)
    checked = 0
    while checked < profiles:
        p = random_profile(rng)
        cross = crossover_batch(p)
        if cross > 2000:
            continue
        checked += 1
        base = step_latency(p, 1)
        top = int(np.floor(cross))
        flat = all(step_latency(p, n) == base for n in range(1, top + 1))
        tail = [step_latency(p, n) for n in range(max(top, 1), top + 6)]
        rising = all(b > a for a, b in zip(tail, tail[1:]))
        c.check(flat and rising, f"profile {p}: crossover {cross:.3f}")
    cfg = GroupConfig(2, 10, Mode.GROUP_THINK_INTERLEAVED)
    lock = GroupConfig(2, 10, Mode.GROUP_THINK_LOCKSTEP)
    c.check(total_latency(cfg, example, 10) == 2 * total_latency(lock, example, 10), "interleaved total is not 2x lockstep")
    c.check(total_latency(lock, example, 0) == 0, "k=0 total is not 0")


# -- registry ----------------------------------------------------------------------

CHECKS: list[tuple[str, Callable[[Counter], None]]] = [
    ("mask.conformance", check_mask_conformance),
    ("mask.interleaved_within_step", check_interleaved_within_step),
    ("layout.slots_example", check_slot_example),
    ("layout.local_formula", check_local_formula),
    ("layout.positions_unique", check_positions_unique),
    ("reduction.single_agent", check_reduction),
    ("equivalence.incremental_full", check_equivalence),
    ("fidelity.conditioning", check_conditioning),
    ("fidelity.answer_phase", check_answer_phase),
    ("determinism.replay", check_replay),
    ("latency.accounting", check_latency_accounting),
    ("coverage.analytic_curves", check_analytic_curves),
    ("coverage.properties", check_coverage_properties),
    ("fw.oracles", check_fw),
    ("latency.roofline", check_latency),
]


def run_checks(name_filter: str | None = None, mask_file: str | Path | None = None) -> list[CheckResult]:
    selected = [(n, f) for n, f in CHECKS if not name_filter or name_filter in n]
    if mask_file is not None:
        selected = [(n, f) for n, f in selected if n != "mask.conformance"]
        selected.insert(0, ("mask.file_conformance", lambda c: check_mask_file(c, Path(mask_file))))
    results = []
    for name, fn in selected:
        counter = Counter()
        start = time.perf_counter()
        try:
            fn(counter)
        except Exception as exc:  # a crashing check is a failing check
            counter.failures.append(f"{type(exc).__name__}: {exc}")
        results.append(CheckResult(name, not counter.failures, counter.cases, counter.failures, time.perf_counter() - start))
    return results

import json

import numpy as np
import pytest

from groupthink.engine import (
    ContextOverflowError,
    ModelSource,
    SamplerConfig,
    ScriptedSource,
    ScriptError,
    SourceError,
    Transcript,
    answer_context,
    reference_answer,
    run_answer_phase,
    run_think_phase,
    sample,
)
from groupthink.evaluation import coverage_enumeration
from groupthink.model import ModelConfig, causal_mask, forward_full, init_model
from groupthink.scheduler import GroupConfig, Mode, generation_order, position_of
from groupthink.scripts import collision_avoiding, disjoint, duplicate_count, item_pool, overlapping
from groupthink.tokenizer import ByteTokenizer, Token
from groupthink.verify import conditioning_errors, run_toy

TOK = ByteTokenizer()


def prompt_tokens(text="Count:"):
    return [TOK.token(TOK.BOS), *TOK.tokens(text)]


# -- sampling -------------------------------------------------------------------------


def test_greedy_picks_first_maximum():
    assert sample(np.array([1.0, 3.0, 3.0]), SamplerConfig(0.0), np.random.default_rng(0)) == 1


def test_sampling_is_deterministic_for_fixed_seed():
    logits = np.array([0.3, 1.2, -0.5, 0.9])
    s = SamplerConfig(0.6, seed=4)
    a = [sample(logits, s, s.agent_rng(1)) for _ in range(1)]
    b = [sample(logits, s, s.agent_rng(1)) for _ in range(1)]
    assert a == b
    r1, r2 = s.agent_rng(2), s.agent_rng(2)
    assert [sample(logits, s, r1) for _ in range(50)] == [sample(logits, s, r2) for _ in range(50)]


def test_sampling_symmetric_logits_frequency():
    s = SamplerConfig(0.6, seed=123)
    rng = s.agent_rng(1)
    draws = np.array([sample(np.array([0.0, 0.0]), s, rng) for _ in range(100_000)])
    assert abs((draws == 0).mean() - 0.5) <= 0.01


def test_sampling_matches_softmax():
    logits = np.array([0.0, 1.0, 2.0])
    s = SamplerConfig(0.5, seed=9)
    rng = s.agent_rng(1)
    draws = np.bincount([sample(logits, s, rng) for _ in range(40_000)], minlength=3) / 40_000
    p = np.exp(logits / 0.5)
    p /= p.sum()
    assert np.abs(draws - p).max() < 0.01


def test_sampling_rejects_bad_logits():
    s = SamplerConfig(0.7)
    with pytest.raises(ValueError):
        sample(np.array([-np.inf, -np.inf]), s, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample(np.array([0.0, np.nan]), s, np.random.default_rng(0))
    with pytest.raises(ValueError):
        SamplerConfig(-0.1)


def test_masked_logits_never_sampled():
    s = SamplerConfig(1.0, seed=1)
    rng = s.agent_rng(1)
    logits = np.array([-np.inf, 0.0, -np.inf, 0.0])
    assert {sample(logits, s, rng) for _ in range(500)} == {1, 3}


# -- think phase with the toy model ---------------------------------------------------------


def plain_decode(model, prompt, budget, sampler, agent=1):
    """Ordinary causal decoding with full recompute at each step."""
    ids = [t.id for t in prompt]
    rng = sampler.agent_rng(agent)
    out = []
    for _ in range(budget):
        logits = forward_full(model, ids, np.arange(1, len(ids) + 1), causal_mask(len(ids)))
        nxt = sample(logits[-1], sampler, rng)
        out.append(nxt)
        ids.append(nxt)
    return out


@pytest.mark.parametrize("mode", list(Mode))
def test_single_agent_equals_plain_decoding(small_model, mode):
    prompt = prompt_tokens()
    sampler = SamplerConfig(0.8, seed=21)
    cfg = GroupConfig(1, 10, mode, len(prompt))
    t = run_think_phase(cfg, ModelSource(small_model, TOK), prompt, sampler)
    assert [e.token_id for e in t.events] == plain_decode(small_model, prompt, 10, sampler)


def test_events_follow_generation_order_and_layout(small_model):
    prompt = prompt_tokens()
    aps = [TOK.fit(f"A{n}", 2) for n in (1, 2, 3)]
    for mode in (Mode.GROUP_THINK_LOCKSTEP, Mode.GROUP_THINK_INTERLEAVED, Mode.INDEPENDENT_SAMPLING):
        cfg = GroupConfig(3, 4, mode, len(prompt), 2)
        t = run_think_phase(cfg, ModelSource(small_model, TOK), prompt, SamplerConfig(0.9, 2), aps)
        order = [c for ev in generation_order(cfg) if ev.kind == "generate" for c in ev.coords]
        assert [e.coord for e in t.events] == order
        assert all(e.position == position_of(cfg, e.coord) for e in t.events)


@pytest.mark.parametrize("mode", [Mode.GROUP_THINK_LOCKSTEP, Mode.GROUP_THINK_INTERLEAVED, Mode.INDEPENDENT_SAMPLING])
def test_conditioning_fidelity(small_model, mode):
    t = run_toy(small_model, mode, 3, 6, seed=4, record_logits=True)
    errs = conditioning_errors(small_model, t)
    assert len(errs) == 18
    assert max(errs) <= 1e-5


def test_lockstep_slot_layout_uses_cache_and_matches_oracle(small_model):
    prompt = prompt_tokens()
    aps = [TOK.fit(f"A{n}", 2) for n in (1, 2)]
    cfg = GroupConfig(2, 5, Mode.GROUP_THINK_LOCKSTEP, len(prompt), 2, layout="slots")
    src = ModelSource(small_model, TOK)
    t = run_think_phase(cfg, src, prompt, SamplerConfig(0.7, 3), aps, record_logits=True)
    assert src.use_cache
    assert max(conditioning_errors(small_model, t)) <= 1e-5


def test_strategies_agree_where_cache_is_valid(small_model):
    prompt = prompt_tokens()
    cfg = GroupConfig(3, 5, Mode.GROUP_THINK_LOCKSTEP, len(prompt))
    a = run_think_phase(cfg, ModelSource(small_model, TOK, strategy="cache"), prompt, SamplerConfig(0.0))
    b = run_think_phase(cfg, ModelSource(small_model, TOK, strategy="recompute"), prompt, SamplerConfig(0.0))
    assert [e.token_id for e in a.events] == [e.token_id for e in b.events]


def test_cache_strategy_refused_for_interleaved(small_model):
    cfg = GroupConfig(2, 3, Mode.GROUP_THINK_INTERLEAVED, 2)
    with pytest.raises(ValueError, match="cannot be served"):
        run_think_phase(cfg, ModelSource(small_model, TOK, strategy="cache"), prompt_tokens("x"), SamplerConfig())


def test_independent_sampling_shared_seed_gives_identical_chains(small_model):
    prompt = prompt_tokens()
    ap = TOK.fit("T:", 2)
    cfg = GroupConfig(2, 12, Mode.INDEPENDENT_SAMPLING, len(prompt), 2)
    sampler = SamplerConfig(1.0, agent_seeds=(77, 77))
    t = run_think_phase(cfg, ModelSource(small_model, TOK), prompt, sampler, [ap, ap])
    assert [e.token_id for e in t.chain(1)] == [e.token_id for e in t.chain(2)]
    # distinct seeds diverge
    t2 = run_think_phase(cfg, ModelSource(small_model, TOK), prompt, SamplerConfig(1.0, agent_seeds=(1, 2)), [ap, ap])
    assert [e.token_id for e in t2.chain(1)] != [e.token_id for e in t2.chain(2)]


def test_prompt_length_must_match(small_model):
    cfg = GroupConfig(1, 3, Mode.SINGLE_COT, 5)
    with pytest.raises(ValueError, match="prompt has"):
        run_think_phase(cfg, ModelSource(small_model, TOK), prompt_tokens("ab"), SamplerConfig())


def test_context_overflow(small_model):
    model = init_model(ModelConfig(num_layers=1, num_heads=1, head_dim=4, context_length=12))
    prompt = prompt_tokens("abcd")
    cfg = GroupConfig(2, 8, Mode.GROUP_THINK_LOCKSTEP, len(prompt))
    with pytest.raises(ContextOverflowError):
        run_think_phase(cfg, ModelSource(model, TOK), prompt, SamplerConfig())


def test_model_source_needs_a_query(small_model):
    with pytest.raises(SourceError):
        run_think_phase(GroupConfig(1, 2), ModelSource(small_model, TOK), [], SamplerConfig())


def test_end_token_freezes_agent(small_model):
    def program(n):
        def step(ctx):
            if n == 1 and ctx.step == 2:
                return "<end>"
            return f"{n}.{ctx.step} "

        return step

    src = ScriptedSource({1: program(1), 2: program(2)})
    cfg = GroupConfig(2, 5, Mode.GROUP_THINK_LOCKSTEP)
    src.begin(cfg)
    end_id = src._token("<end>").id
    t = run_think_phase(cfg, src, [], SamplerConfig(), end_token=end_id)
    assert t.lengths() == {1: 2, 2: 5}
    assert t.latency_tokens == 5 and t.total_tokens == 7


# -- answer phase -------------------------------------------------------------------------


def test_answer_matches_full_recompute(small_model):
    t = run_toy(small_model, Mode.GROUP_THINK_LOCKSTEP, 2, 5, seed=8)
    header = TOK.tokens("\nAnswer:")
    got = run_answer_phase(t.config, ModelSource(small_model, TOK), t, SamplerConfig(0.0), 8, answer_header=header)
    ctx = answer_context(t, answer_header=header)
    # hand-built layout: prompt, then each header + chain in agent order, then the answer header
    manual = [x.id for x in t.prompt]
    for n in (1, 2):
        manual += [x.id for x in t.agent_prompts[n - 1]] + [e.token_id for e in t.chain(n)]
    manual += [x.id for x in header]
    assert [x.id for x in ctx] == manual
    assert [x.id for x in got] == reference_answer(small_model, ctx, 8)
    assert len(got) <= 8


def test_answer_single_agent_continues_chain(small_model):
    prompt = prompt_tokens()
    cfg = GroupConfig(1, 6, Mode.SINGLE_COT, len(prompt))
    sampler = SamplerConfig(0.0)
    t = run_think_phase(cfg, ModelSource(small_model, TOK), prompt, sampler)
    header = TOK.tokens(" so:")
    got = run_answer_phase(cfg, ModelSource(small_model, TOK), t, sampler, 5, answer_header=header)
    seq = [x.id for x in prompt] + [e.token_id for e in t.events] + [x.id for x in header]
    want = []
    for _ in range(5):
        logits = forward_full(small_model, seq, np.arange(1, len(seq) + 1), causal_mask(len(seq)))
        want.append(int(np.argmax(logits[-1])))
        seq.append(want[-1])
    assert [x.id for x in got] == want


def test_answer_with_empty_chains_uses_prompt_only(small_model):
    prompt = prompt_tokens()
    cfg = GroupConfig(2, 3, Mode.GROUP_THINK_LOCKSTEP, len(prompt))
    empty = ScriptedSource({1: [], 2: []})
    t = run_think_phase(cfg, empty, prompt, SamplerConfig())
    assert t.events == []
    assert [x.id for x in answer_context(t)] == [x.id for x in prompt]
    got = run_answer_phase(cfg, ModelSource(small_model, TOK), t, SamplerConfig(0.0), 4)
    assert [x.id for x in got] == reference_answer(small_model, prompt, 4)


def test_answer_budget_zero_and_config_mismatch(small_model):
    t = run_toy(small_model, Mode.GROUP_THINK_LOCKSTEP, 2, 2, seed=0)
    assert run_answer_phase(t.config, ModelSource(small_model, TOK), t, SamplerConfig(), 0) == []
    other = GroupConfig(3, 2, Mode.GROUP_THINK_LOCKSTEP)
    with pytest.raises(ValueError):
        run_answer_phase(other, ModelSource(small_model, TOK), t, SamplerConfig(), 3)


# -- scripted sources ---------------------------------------------------------------------


def test_scripted_fixed_strings_follow_generation_order():
    scripts = {1: ["a1", "a2", "a3"], 2: ["b1", "b2", "b3"]}
    for mode in (Mode.GROUP_THINK_LOCKSTEP, Mode.GROUP_THINK_INTERLEAVED, Mode.INDEPENDENT_SAMPLING):
        cfg = GroupConfig(2, 3, mode)
        t = run_think_phase(cfg, ScriptedSource(scripts), [], SamplerConfig())
        assert [e.text for e in t.events] == ["a1", "b1", "a2", "b2", "a3", "b3"]


def test_disjoint_scripts_grow_two_items_per_step():
    pool = item_pool(50)
    cfg = GroupConfig(2, 10, Mode.GROUP_THINK_LOCKSTEP)
    t = run_think_phase(cfg, ScriptedSource(disjoint(pool, 2)), [], SamplerConfig())
    for k in range(11):
        union = {line for text in t.agent_texts(k) for line in text.split()}
        assert len(union) == 2 * k


def test_collision_avoiding_interleaved_has_no_duplicates():
    pool = item_pool(30)
    aps = [TOK.fit(f"T{n}", 2) for n in (1, 2, 3)]
    for seed in range(5):
        cfg = GroupConfig(3, 10, Mode.GROUP_THINK_INTERLEAVED, 0, 2)
        t = run_think_phase(cfg, ScriptedSource(collision_avoiding(pool, 3), seed=seed), [], SamplerConfig(), aps)
        assert duplicate_count(t.agent_texts()) == 0
        assert t.total_tokens == 30


def test_step_one_without_agent_prompts_sees_nothing():
    # with no agent prompt the first query row is shared and precedes every thought
    seen = {}

    def spy(ctx):
        seen[(ctx.agent, ctx.step)] = ctx.visible_tokens()
        return f"{ctx.agent}{ctx.step}"

    run_think_phase(GroupConfig(2, 2, Mode.GROUP_THINK_INTERLEAVED), ScriptedSource({1: spy, 2: spy}), [], SamplerConfig())
    assert seen[(2, 1)] == []
    assert seen[(2, 2)] == ["11", "12", "21"]


def test_independent_overlapping_scripts_duplicate():
    pool = item_pool(30)
    cfg = GroupConfig(3, 6, Mode.INDEPENDENT_SAMPLING)
    t = run_think_phase(cfg, ScriptedSource(overlapping(pool, 3)), [], SamplerConfig())
    assert duplicate_count(t.agent_texts()) == 12
    assert coverage_enumeration(t.agent_texts(), 18) == pytest.approx(6 / 18)
    # the redraw script cannot avoid what it cannot see
    t2 = run_think_phase(cfg, ScriptedSource(collision_avoiding(item_pool(8), 3), seed=1), [], SamplerConfig())
    assert duplicate_count(t2.agent_texts()) > 0


def test_script_reading_invisible_agent_fails():
    def nosy(ctx):
        return "".join(ctx.chain(2)) + "x"

    cfg = GroupConfig(2, 2, Mode.INDEPENDENT_SAMPLING)
    with pytest.raises(ScriptError):
        run_think_phase(cfg, ScriptedSource({1: nosy, 2: ["y", "y"]}), [], SamplerConfig())
    # the same script is fine under Group Think
    cfg = GroupConfig(2, 2, Mode.GROUP_THINK_LOCKSTEP)
    t = run_think_phase(cfg, ScriptedSource({1: nosy, 2: ["y", "z"]}), [], SamplerConfig())
    assert t.chain_text(1) == "xyx"


def test_scripted_source_sees_only_permitted_tokens():
    seen = {}

    def spy(n):
        def step(ctx):
            seen[(n, ctx.step)] = {a: list(ctx.chain(a)) for a in ctx.visible_agents}
            return f"{n}{ctx.step}"

        return step

    cfg = GroupConfig(2, 2, Mode.GROUP_THINK_INTERLEAVED)
    run_think_phase(cfg, ScriptedSource({1: spy(1), 2: spy(2)}), [], SamplerConfig())
    assert seen[(2, 2)] == {1: ["11", "12"], 2: ["21"]}
    assert seen[(1, 2)] == {1: ["11"], 2: ["21"]}


def test_missing_script_rejected():
    with pytest.raises(ValueError, match="no script"):
        run_think_phase(GroupConfig(2, 2), ScriptedSource({1: ["a"]}), [], SamplerConfig())


# -- transcripts ------------------------------------------------------------------------


def test_transcript_jsonl_round_trip(small_model):
    t = run_toy(small_model, Mode.GROUP_THINK_INTERLEAVED, 2, 4, seed=5)
    t.answer = [Token(65, "A"), Token(66, "B")]
    t.timestamp = "2026-01-01T00:00:00+00:00"
    text = t.dumps()
    records = [json.loads(line) for line in text.splitlines()]
    assert records[0]["type"] == "header" and records[0]["config"]["mode"] == "group_think_interleaved"
    assert [r["type"] for r in records[1:]] == ["event"] * 8 + ["answer"]
    assert set(records[1]) == {"type", "agent", "step", "position", "token_id", "text"}
    again = Transcript.loads(text)
    assert again.dumps() == text
    assert again.config == t.config


def test_rerun_is_bitwise_identical(small_model):
    a = run_toy(small_model, Mode.GROUP_THINK_LOCKSTEP, 3, 5, seed=12)
    b = run_toy(small_model, Mode.GROUP_THINK_LOCKSTEP, 3, 5, seed=12)
    assert a.dumps() == b.dumps()


def test_latency_is_longest_chain_not_total():
    cfg = GroupConfig(3, 6, Mode.GROUP_THINK_LOCKSTEP)
    src = ScriptedSource({1: ["a"] * 2, 2: ["b"] * 6, 3: ["c"] * 4})
    t = run_think_phase(cfg, src, [], SamplerConfig())
    assert t.latency_tokens == 6
    assert t.total_tokens == 12


def test_transcript_survives_unicode_line_separators():
    cfg = GroupConfig(1, 3, Mode.SINGLE_COT)
    t = run_think_phase(cfg, ScriptedSource({1: ["\x85", "\u2028", "\r"]}), [], SamplerConfig())
    again = Transcript.loads(t.dumps())
    assert again.chain_text(1) == "\x85\u2028\r"

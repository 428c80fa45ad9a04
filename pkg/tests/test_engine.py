import numpy as np
import pytest
import torch

from confu.draft import chain_tree
from confu.engine import (
    DecodeMode,
    KeyedRNG,
    SpeculativeDecoder,
    accept_reject_path,
    accept_tree,
    autoregressive_generate,
    residual,
    target_probs,
)
from confu.errors import ConfigError, ProposalError
from confu.lossless import ScriptedChooser, enumerate_outcomes
from conftest import make_contemplate, make_draft, make_target
from oracles import linear_speculative, neutrality_run


# -- accept_reject_path ------------------------------------------------------


def test_equal_p_q_accepts_everything():
    p = [np.array([0.2, 0.5, 0.3])] * 4
    for seed in range(20):
        a, _ = accept_reject_path([1, 2, 0], p[:3], p, KeyedRNG(seed))
        assert a == 3


def test_two_token_residual_example():
    """q=(1,0) proposing a, p=(0.5,0.5): accept with 0.5; residual is all on b."""
    p = np.array([0.5, 0.5])
    q = np.array([1.0, 0.0])
    assert residual(p, q).tolist() == [0.0, 1.0]
    taken = [accept_reject_path([0], [q], [p, p], KeyedRNG(s)) for s in range(4000)]
    acc = np.mean([a for a, _ in taken])
    assert abs(acc - 0.5) < 0.03
    assert all(t == 1 for a, t in taken if a == 0)


def test_greedy_rule_prefix_length_two():
    p = [np.eye(4)[i] for i in (1, 2, 3, 0)]
    q = [np.full(4, 0.25)] * 3
    a, nxt = accept_reject_path([1, 2, 0], q, p, KeyedRNG(0), rule="greedy-match")
    assert (a, nxt) == (2, 3)


def test_zero_draft_probability_is_proposal_error():
    with pytest.raises(ProposalError):
        accept_reject_path([1], [np.array([1.0, 0.0])], [np.ones(2) / 2] * 2, KeyedRNG(0))


def test_full_acceptance_draws_bonus_from_last_target_dist():
    p = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])]
    assert accept_reject_path([0], [np.array([1.0, 0.0, 0.0])], p, KeyedRNG(1)) == (1, 2)


def test_keyed_rng_is_order_independent():
    a, b = KeyedRNG(5), KeyedRNG(5)
    x = [a.uniform((1, 2, 0)), a.uniform((3, 0, 1))]
    y = [b.uniform((3, 0, 1)), b.uniform((1, 2, 0))]
    assert x == y[::-1]


def test_target_probs_temperature_zero_is_argmax():
    p = target_probs(torch.tensor([0.1, 2.0, -1.0]), 0.0)
    assert p.tolist() == [0.0, 1.0, 0.0]


# -- accept_tree ---------------------------------------------------------------


def test_tree_sibling_recycling_removes_rejected_token():
    from confu.draft import DraftTree

    tree = DraftTree([9, 0, 1], [-1, 0, 0], [0, 1, 1], [0, 0, 0], [0, 0, 0], [[1, 2], [], []])
    p = np.array([[0.5, 0.5, 0.0], [0, 0, 1.0], [0, 0, 1.0]])
    ch = ScriptedChooser([1, 0, 0])  # reject child 1, child 2 is then certain
    path, nxt = accept_tree(tree, p, "lossless", ch)
    assert path == [0, 2] and nxt == 2 and ch.prob == 0.5


def test_tree_first_token_is_distributed_as_target():
    from confu.draft import DraftTree

    tree = DraftTree([9, 0, 1, 3], [-1, 0, 0, 1], [0, 1, 1, 2], [0] * 4, [0] * 4, [[1, 2], [3], [], []])
    rs = np.random.default_rng(0)
    p = rs.dirichlet(np.ones(4), size=4)

    def first(ch):
        path, nxt = accept_tree(tree, p, "lossless", ch)
        return tree.tokens[path[1]] if len(path) > 1 else nxt

    dist = np.zeros(4)
    for tok, prob in enumerate_outcomes(first):
        dist[tok] += prob
    assert np.abs(dist - p[0]).max() < 1e-12


def test_greedy_no_match_gives_target_argmax_at_root():
    tree = chain_tree([4, 1, 2])
    p = np.zeros((3, 5))
    p[:, 3] = 1.0
    path, nxt = accept_tree(tree, p, "greedy-match", KeyedRNG(0))
    assert path == [0] and nxt == 3


# -- whole decoder ---------------------------------------------------------------


def confu_decoder(target, nodes=30, branch=4, max_depth=8, temperature=0.0, rule="lossless", seed=1):
    draft = make_draft(target, future=True, seed=seed, logit_scale=4.0)
    cm = make_contemplate(target)
    return SpeculativeDecoder(target, draft, DecodeMode("confu", temperature, rule, nodes, branch, max_depth), cm)


def base_decoder(target, nodes=30, branch=4, max_depth=8, temperature=0.0, rule="lossless", seed=1):
    draft = make_draft(target, seed=seed, logit_scale=4.0)
    return SpeculativeDecoder(target, draft, DecodeMode("baseline", temperature, rule, nodes, branch, max_depth))


@pytest.mark.parametrize("temperature", [0.0, 1.0])
@pytest.mark.parametrize("depth", [1, 3])
def test_chain_mode_equals_linear_speculative_oracle(temperature, depth):
    target = make_target(max_len=64, logit_scale=3.0)
    dec = base_decoder(target, nodes=depth + 1, branch=1, max_depth=depth, temperature=temperature)
    for seed in range(4):
        prompt = [1 + seed, 2, 3]
        got, _ = dec.generate(prompt, 12, seed=seed)
        want = linear_speculative(target, dec.draft, prompt, 12, depth, temperature, seed)
        assert got == want


def test_greedy_speculative_equals_greedy_autoregressive(target):
    dec = confu_decoder(target)
    out, m = dec.generate([1, 2, 3], 20, seed=0)
    assert out == autoregressive_generate(target, [1, 2, 3], 20, 0.0)
    assert m.draft_rows == m.contemplate_rows


def test_confu_round_rows_2T():
    target = make_target(max_len=64)
    dec = confu_decoder(target, nodes=30, branch=4, max_depth=8)
    state = dec.start([1, 2, 3, 4, 5]).state
    state.tokens.append(6)
    res = dec.verify_round(state, KeyedRNG(0))
    assert res.rows == (30, 30)
    assert 0 <= res.a <= 8


def test_max_tokens_one_is_prefill_only(target):
    out, m = confu_decoder(target).generate([1, 2], 1)
    assert len(out) == 1 and m.rounds == 0 and m.draft_rows == 0


def test_zero_draft_budget_is_autoregressive(target):
    dec = base_decoder(target, nodes=1, temperature=1.0)
    out, m = dec.generate([1, 2], 10, seed=3)
    assert m.tau == 1.0 and m.rounds == 9
    assert all(a == 1 for a in m.accepted_per_round)


@pytest.mark.parametrize("depth", [1, 2, 4])
def test_tau_bounds_for_chains(depth):
    target = make_target(max_len=64, logit_scale=3.0)
    for temperature in (0.0, 1.0):
        _, m = base_decoder(target, nodes=depth + 1, branch=1, max_depth=depth,
                            temperature=temperature).generate([3, 1, 4], 16, seed=2)
        assert 1 <= m.tau <= depth + 1


def test_monotone_budget_with_nested_trees(target):
    """A best-first tree of budget T1 is a prefix of the one of budget T2 > T1."""
    dec = base_decoder(target, rule="greedy-match")
    state = dec.start([2, 5, 1]).state
    state.tokens.append(3)
    prev = -1
    for nodes in (1, 2, 4, 8, 16, 30):
        d = base_decoder(target, nodes=nodes, rule="greedy-match")
        d.draft = dec.draft
        plan = d.plan_round(state.clone())
        path, _ = d.choose(plan, KeyedRNG(0), 1)
        assert len(path) >= prev
        prev = len(path)
    assert prev > 1


def test_engine_neutrality(target):
    dec = confu_decoder(target, temperature=1.0)
    for seed in range(5):
        got, stripped, gap = neutrality_run(dec, [seed + 1, 2, 3], 12, seed)
        assert gap < 1e-9 and got == stripped


def test_eos_stops_generation(target):
    dec = base_decoder(target)
    full, _ = dec.generate([1, 2, 3], 12)
    eos = full[4]
    dec.eos = eos
    out, _ = dec.generate([1, 2, 3], 12)
    assert out[-1] == eos and eos not in out[:-1]


def test_capacity_sets_truncated_flag():
    target = make_target(max_len=12)
    out, m = confu_decoder(target).generate([1, 2, 3, 4], 50)
    assert m.truncated and len(out) < 50


def test_decode_mode_and_decoder_validation(target):
    with pytest.raises(ConfigError):
        DecodeMode(mode="other")
    with pytest.raises(ConfigError):
        DecodeMode(temperature=-1)
    with pytest.raises(ConfigError):
        SpeculativeDecoder(target, make_draft(target), DecodeMode("confu"))
    with pytest.raises(ValueError):
        base_decoder(target).generate([], 3)


def test_metrics_json_fields(target):
    _, m = confu_decoder(target).generate([1, 2], 6)
    assert set(m.to_json()) == {"tau", "tokens", "rounds", "draft_rows", "contemplate_rows", "wall_ns"}
    assert sum(m.con_experts) == 2 * m.rounds and sum(m.f_experts) == 2 * m.rounds

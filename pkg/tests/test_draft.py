import pytest
import torch

from confu.draft import DraftContext, DraftInputSlot, RootState, build_draft_tree
from confu.errors import ConfigError, ContractError, DimensionError
from conftest import make_draft, make_target
from oracles import draft_chain, naive_matvec, top_paths


def test_down_project_matches_hand_matvec(target):
    head = make_draft(target)
    h = torch.randn(3 * target.config.d_model, dtype=torch.float64)
    got = head.down_project(h).tolist()
    want = naive_matvec(head.w("w_proj"), h)
    assert max(abs(a - b) for a, b in zip(got, want)) < 1e-12


def test_down_project_identity_block():
    target = make_target(d=4, heads=1)
    head = make_draft(target)
    with torch.no_grad():
        head.w("w_proj").zero_()
        head.w("w_proj")[:, 4:8] = torch.eye(4)
    h = torch.arange(12, dtype=torch.float64)
    assert torch.equal(head.down_project(h), h[4:8])


def test_down_project_dimension_error(target):
    with pytest.raises(DimensionError):
        make_draft(target).down_project(torch.zeros(target.config.d_model, dtype=torch.float64))


def _ctx_slots(head, target, tokens):
    out = target.forward_full(tokens)
    emb = head.w("tok_emb")
    return [DraftInputSlot(emb[t], head.down_project(out.taps[j]), j) for j, t in enumerate(tokens)]


def test_distributions_sum_to_one(target):
    head = make_draft(target, future=True)
    slots = _ctx_slots(head, target, [1, 2, 3])
    fut = head.future_slot(torch.randn(16, dtype=torch.float64), slots[-1].feature, 3)
    q, _ = head.draft_next(slots, fut)
    assert abs(float(q.detach().sum()) - 1.0) < 1e-12 and bool((q >= 0).all())


def test_future_slot_required_in_confu_mode(target):
    head = make_draft(target, future=True)
    with pytest.raises(ContractError):
        head.draft_next(_ctx_slots(head, target, [1, 2]))


def test_same_future_slot_is_used_at_every_depth(target):
    """Changing the future changes every step; fixing it makes steps reproducible."""
    torch.manual_seed(0)
    head = make_draft(target, future=True)
    with torch.no_grad():
        head.w("w_fuse").mul_(20)
    slots = _ctx_slots(head, target, [1, 2, 3])
    fut = head.future_slot(torch.randn(16, dtype=torch.float64), slots[-1].feature, 3)
    other = head.future_slot(torch.randn(16, dtype=torch.float64), slots[-1].feature, 3)
    q1, h1 = head.draft_next(slots, fut)
    q1b, _ = head.draft_next(slots, fut)
    assert torch.equal(q1, q1b)
    assert not torch.allclose(q1, head.draft_next(slots, other)[0])
    deeper = slots + [DraftInputSlot(head.w("tok_emb")[4], h1, 3)]
    q2, _ = head.draft_next(deeper, fut)
    assert not torch.allclose(q2, head.draft_next(deeper, other)[0])


def test_ablation_without_future_is_plain_eagle(target):
    plain = make_draft(target, future=False, seed=1)
    fut = make_draft(target, future=True, seed=1)
    slots = _ctx_slots(plain, target, [4, 1, 3])
    q0, h0 = plain.draft_next(slots)
    q1, h1 = fut.draft_next(slots, use_future=False)
    assert torch.equal(q0, q1) and torch.equal(h0, h1)


def _logq_fn(head, target, ctx_tokens, root, future_u=None):
    """Draft log-probs after a path, recomputed from scratch with draft_next."""
    out = target.forward_full(ctx_tokens)
    emb = head.w("tok_emb")
    m = len(ctx_tokens)
    ctx = [DraftInputSlot(emb[t], head.down_project(out.taps[j]), j) for j, t in enumerate(ctx_tokens)]

    def step(slots):
        if future_u is None:
            return head.draft_next(slots, use_future=False)
        u = torch.stack([head.slot_vector(s) for s in slots] + [future_u])
        k, v = head.kv(u)
        last = len(slots) - 1
        h = head.attend(u[last : last + 1], k, v, torch.ones(1, u.shape[0], dtype=torch.bool))[0]
        return torch.softmax(head.logits(h), -1), h

    _, h_root = step(ctx)

    def logq(path):
        slots = ctx + [DraftInputSlot(emb[root], h_root, m)]
        q, feat = step(slots)
        for i, tok in enumerate(path):
            slots = slots + [DraftInputSlot(emb[tok], feat, m + i + 1)]
            q, feat = step(slots)
        return torch.log(q).tolist()

    return logq


def _tree(head, target, ctx_tokens, root, budget, branch, max_depth, future_u=None):
    dctx = DraftContext(head)
    dctx.extend(ctx_tokens, target.forward_full(ctx_tokens).taps)
    return build_draft_tree(head, RootState(dctx, root, future_u), budget, branch, max_depth)


@pytest.mark.parametrize("budget", [5, 6, 12])
def test_tree_holds_the_most_probable_paths(target, budget):
    torch.manual_seed(1)
    head = make_draft(target, logit_scale=3.0)
    ctx, root = [1, 2, 3], 5
    tree = _tree(head, target, ctx, root, budget, 3, 4)
    oracle = top_paths(_logq_fn(head, target, ctx, root), (), budget - 1, 3, 4)
    got = sorted(tuple(tree.tokens[n] for n in tree.path_to(i)[1:]) for i in range(1, len(tree)))
    assert got == sorted(p for _, p in oracle)
    for i in range(1, len(tree)):
        path = tuple(tree.tokens[n] for n in tree.path_to(i)[1:])
        want = dict((p, c) for c, p in oracle)[path]
        assert abs(tree.cum_logq[i] - want) < 1e-9


def test_tree_with_future_matches_recomputed_paths(target):
    head = make_draft(target, future=True, logit_scale=3.0)
    with torch.no_grad():
        head.w("w_fuse").mul_(10)
    ctx, root = [2, 7, 1], 4
    taps = target.forward_full(ctx).taps
    tok, feat, _ = head.future_parts(torch.randn(16, dtype=torch.float64), head.down_project(taps[-1]))
    fu = head.fuse(tok, feat, len(ctx))
    tree = _tree(head, target, ctx, root, 8, 2, 5, fu)
    oracle = top_paths(_logq_fn(head, target, ctx, root, fu), (), 7, 2, 5)
    got = sorted(tuple(tree.tokens[n] for n in tree.path_to(i)[1:]) for i in range(1, len(tree)))
    assert got == sorted(p for _, p in oracle)


def test_tree_budget_five_keeps_top_four_paths(target):
    head = make_draft(target, logit_scale=3.0)
    tree = _tree(head, target, [1, 2], 3, 5, 4, 8)
    assert len(tree) == 5 and tree.parents[0] == -1


def test_chain_with_branch_one_equals_greedy_draft(target):
    head = make_draft(target, logit_scale=2.0)
    ctx = [3, 1, 4, 1]
    root = 5
    K = 4
    tree = _tree(head, target, ctx, root, K + 1, 1, K)
    assert tree.parents == [-1, 0, 1, 2, 3]
    out = target.forward_full(ctx)
    assert tree.tokens[1:] == draft_chain(head, out, ctx + [root], K)


def test_budget_one_is_root_only(target):
    tree = _tree(make_draft(target), target, [1, 2], 3, 1, 4, 8)
    assert tree.tokens == [3] and tree.children == [[]]


def test_tree_is_breadth_first_with_parents_first(target):
    tree = _tree(make_draft(target, logit_scale=3.0), target, [1, 2, 3], 4, 12, 3, 4)
    assert all(p < i for i, p in enumerate(tree.parents) if i)
    assert tree.depths == sorted(tree.depths)
    assert max(tree.depths) <= 4


def test_bad_budget(target):
    with pytest.raises(ConfigError):
        _tree(make_draft(target), target, [1], 2, 0, 1, 1)


def test_draft_config_matches_target(target):
    from confu.draft import DraftConfig, DraftHead

    with pytest.raises(ConfigError):
        DraftHead(DraftConfig(d_model=8, n_heads=2, vocab_size=11), target)

import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))

from confu.draft import DraftConfig, DraftHead  # noqa: E402
from confu.future import ContemplateModule  # noqa: E402
from confu.nn import normal, seeded_generator  # noqa: E402
from confu.target import TargetConfig, TargetModel  # noqa: E402
from confu.training import FutureConfig, build_models  # noqa: E402


def make_target(vocab=11, d=16, heads=2, layers=3, max_len=48, seed=0, logit_scale=1.0):
    t = TargetModel(TargetConfig(vocab, d, heads, layers, max_len), seed=seed)
    if logit_scale != 1.0:
        with torch.no_grad():
            t.w("lm_head").mul_(logit_scale)
    t.freeze()
    return t


def make_draft(target, future=False, seed=1, n_expert=4, k_expert=2, logit_scale=1.0):
    c = target.config
    head = DraftHead(
        DraftConfig(d_model=c.d_model, n_heads=c.n_heads, vocab_size=c.vocab_size),
        target, future=future, seed=seed, n_expert=n_expert, k_expert=k_expert,
    )
    if logit_scale != 1.0:
        with torch.no_grad():
            head.w("lm_head").mul_(logit_scale)
    return head


def make_contemplate(target, s=4, n_expert=4, k_expert=2, seed=2):
    c = target.config
    return ContemplateModule(c.n_layers, c.d_model, s, n_expert, k_expert, seed=seed,
                             center=target.tok_emb.detach().mean(dim=0))


@pytest.fixture
def target():
    return make_target()


@pytest.fixture
def sharp_target():
    return make_target(logit_scale=40.0)


def maxabs(t) -> float:
    return float(torch.as_tensor(t).detach().abs().max())


def small_models(seed=0, d=16, vocab=13, n_expert=4, k_expert=2, s=4, random_routers=True):
    """Random models with sharpened heads so KL terms are far from zero."""
    tc = TargetConfig(vocab_size=vocab, d_model=d, n_heads=2, n_layers=3, max_seq_len=32)
    dc = DraftConfig(d_model=d, n_heads=2, vocab_size=vocab)
    m = build_models(tc, dc, FutureConfig(soft_prompts=s, n_expert=n_expert, k_expert=k_expert), seed=seed)
    g = seeded_generator(seed + 100)
    with torch.no_grad():
        m.target.w("lm_head").mul_(8.0)
        m.draft.w("lm_head").copy_(m.target.w("lm_head"))
        m.draft.w("w_fuse").mul_(20.0)
        m.draft.w("w_proj").mul_(20.0)
        if random_routers:
            for moe in (m.contemplate.moe, m.draft.moe):
                moe.router.copy_(normal(tuple(moe.router.shape), 1.0, g))
    m.target.freeze()
    return m


def tokens(vocab=13, n=24, b=2, seed=0):
    return np.random.default_rng(seed).integers(0, vocab, size=(b, n))

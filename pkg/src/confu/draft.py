"""Single-layer draft head that reuses target hidden states.

A draft slot fuses a token embedding with a feature vector.  Features
are the down-projected target taps for tokens the target has processed,
and the draft's own output hidden state for tokens it has not.  In ConFu
mode one extra future slot, built from the target's future prediction,
is visible to every query and stays fixed for a whole drafting round.
"""
from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .errors import ConfigError, ContractError, DimensionError
from .future import MoEEmbedder, moe_embed
from .nn import (
    DTYPE,
    ParamStore,
    TensorF64,
    gelu,
    masked_attention,
    merge_heads,
    normal,
    rms_norm,
    seeded_generator,
    split_heads,
)
from .target import TargetModel


@dataclass(frozen=True)
class DraftConfig:
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 259
    d_ff: int = 0
    nodes: int = 30  # tree budget, root included
    branch: int = 4
    max_depth: int = 8
    n_expert: int = 8
    k_expert: int = 2
    proj_bias: bool = False

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.nodes < 1 or self.branch < 1 or self.max_depth < 0:
            raise ConfigError("need nodes >= 1, branch >= 1, max_depth >= 0")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)


@dataclass
class DraftInputSlot:
    token_embedding: TensorF64
    feature: TensorF64
    position: int


class DraftHead:
    """EAGLE-style drafter; ``future=True`` adds the ConFu future slot."""

    def __init__(
        self,
        config: DraftConfig,
        target: TargetModel,
        future: bool = False,
        seed: int = 0,
        n_expert: int | None = None,
        k_expert: int | None = None,
    ) -> None:
        tc = target.config
        if config.d_model != tc.d_model or config.vocab_size != tc.vocab_size:
            raise ConfigError("draft d_model and vocab_size must match the target")
        self.config = config
        self.future = future
        self.max_position = tc.max_seq_len
        d = config.d_model
        g = seeded_generator(seed)
        std = 0.02
        s = self.store = ParamStore()
        s.add("draft.tok_emb", target.tok_emb.detach(), trainable=False)
        s.add("draft.pos_emb", target.pos_emb.detach(), trainable=False)
        s.add("draft.w_proj", normal((d, 3 * d), std, g))
        if config.proj_bias:
            s.add("draft.b_proj", torch.zeros(d, dtype=DTYPE))
        s.add("draft.w_fuse", normal((d, 2 * d), std, g))
        s.add("draft.b_fuse", torch.zeros(d, dtype=DTYPE))
        s.add("draft.norm1", torch.ones(d, dtype=DTYPE))
        for w in ("wq", "wk", "wv"):
            s.add(f"draft.{w}", normal((d, d), std, g))
        s.add("draft.wo", normal((d, d), std / 2**0.5, g))
        s.add("draft.norm2", torch.ones(d, dtype=DTYPE))
        s.add("draft.w1", normal((config.d_ff, d), std, g))
        s.add("draft.w2", normal((d, config.d_ff), std / 2**0.5, g))
        s.add("draft.norm_f", target.w("norm_f").detach())
        s.add("draft.lm_head", target.w("lm_head").detach())
        self.moe: MoEEmbedder | None = None
        if future:
            s.add("draft.w_future", torch.eye(d, dtype=DTYPE))
            self.moe = MoEEmbedder(
                "moe_f",
                d,
                d,
                n_expert if n_expert is not None else config.n_expert,
                k_expert if k_expert is not None else config.k_expert,
                seed=seed + 7,
                center=target.tok_emb.detach().mean(dim=0),
            )
            self.store = ParamStore.union(s, self.moe.store)

    def w(self, name: str) -> TensorF64:
        return self.store[f"draft.{name}"]

    # -- slot construction ---------------------------------------------------

    def down_project(self, h_cat: TensorF64) -> TensorF64:
        d = self.config.d_model
        if h_cat.shape[-1] != 3 * d:
            raise DimensionError(f"expected concatenated taps of size {3 * d}, got {h_cat.shape[-1]}")
        out = h_cat @ self.w("w_proj").T
        if self.config.proj_bias:
            out = out + self.w("b_proj")
        return out

    def fuse(self, token_embedding: TensorF64, feature: TensorF64, position) -> TensorF64:
        x = torch.cat([token_embedding, feature], dim=-1) @ self.w("w_fuse").T + self.w("b_fuse")
        return x + self.w("pos_emb")[position]

    def token_slots(self, tokens, features: TensorF64, positions) -> TensorF64:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        return self.fuse(self.w("tok_emb")[tokens], features, positions)

    def future_parts(self, f: TensorF64, h_md_last: TensorF64):
        """(token-embedding part, feature part) of the future slot."""
        if not self.future:
            raise ContractError("this draft head has no future slot")
        tok, report = moe_embed(h_md_last, self.moe)
        return tok, f @ self.w("w_future").T, report

    def future_slot(self, f: TensorF64, h_md_last: TensorF64, position: int) -> DraftInputSlot:
        tok, feat, _ = self.future_parts(f, h_md_last)
        return DraftInputSlot(tok, feat, position)

    def slot_vector(self, slot: DraftInputSlot) -> TensorF64:
        return self.fuse(slot.token_embedding, slot.feature, slot.position)

    # -- the transformer layer -------------------------------------------------

    def kv(self, u: TensorF64) -> tuple[TensorF64, TensorF64]:
        h = rms_norm(u, self.w("norm1"))
        return h @ self.w("wk").T, h @ self.w("wv").T

    def attend(self, u: TensorF64, keys: TensorF64, values: TensorF64, mask: torch.Tensor) -> TensorF64:
        """Layer output for query slots ``u`` (..., R, d) over the given keys."""
        H = self.config.n_heads
        q = rms_norm(u, self.w("norm1")) @ self.w("wq").T
        att = masked_attention(split_heads(q, H), split_heads(keys, H), split_heads(values, H), mask)
        x = u + merge_heads(att) @ self.w("wo").T
        h = rms_norm(x, self.w("norm2"))
        return x + gelu(h @ self.w("w1").T) @ self.w("w2").T

    def logits(self, hidden: TensorF64) -> TensorF64:
        return rms_norm(hidden, self.w("norm_f")) @ self.w("lm_head").T

    # -- reference single step ---------------------------------------------------

    def draft_next(
        self,
        context_slots: Sequence[DraftInputSlot],
        future_slot: DraftInputSlot | None = None,
        use_future: bool | None = None,
    ) -> tuple[TensorF64, TensorF64]:
        """Draft distribution after the last context slot, and its hidden state.

        Recomputes every slot from scratch; the tree builder uses the
        incremental path and is checked against this one.
        """
        use_future = self.future if use_future is None else use_future
        if use_future and future_slot is None:
            raise ContractError("ConFu drafting needs the future slot at every step")
        if not context_slots:
            raise ContractError("draft_next needs at least one context slot")
        u = torch.stack([self.slot_vector(s) for s in context_slots])
        if use_future:
            u = torch.cat([u, self.slot_vector(future_slot).unsqueeze(0)])
        k, v = self.kv(u)
        mask = torch.ones(1, u.shape[0], dtype=torch.bool)
        last = len(context_slots) - 1
        hidden = self.attend(u[last : last + 1], k, v, mask)[0]
        return torch.softmax(self.logits(hidden), dim=-1), hidden


class DraftContext:
    """Slot vectors and keys/values of tokens whose target taps are known."""

    def __init__(self, head: DraftHead) -> None:
        d = head.config.d_model
        self.head = head
        self.u = torch.zeros(0, d, dtype=DTYPE)
        self.k = torch.zeros(0, d, dtype=DTYPE)
        self.v = torch.zeros(0, d, dtype=DTYPE)
        self.tokens: list[int] = []

    def __len__(self) -> int:
        return len(self.tokens)

    def extend(self, tokens: Sequence[int], taps: TensorF64) -> None:
        start = len(self.tokens)
        pos = torch.arange(start, start + len(tokens))
        u = self.head.token_slots(list(tokens), self.head.down_project(taps), pos)
        k, v = self.head.kv(u)
        self.u = torch.cat([self.u, u])
        self.k = torch.cat([self.k, k])
        self.v = torch.cat([self.v, v])
        self.tokens.extend(int(t) for t in tokens)

    def clone(self) -> "DraftContext":
        out = DraftContext.__new__(DraftContext)
        out.head = self.head
        out.u, out.k, out.v = self.u, self.k, self.v  # never mutated in place
        out.tokens = list(self.tokens)
        return out


@dataclass
class DraftTree:
    """Candidate tree; node 0 is the root (the pending committed token)."""

    tokens: list[int]
    parents: list[int]
    depths: list[int]
    logq: list[float]  # draft log-prob of each node's token under its parent
    cum_logq: list[float]
    children: list[list[int]]  # ranked best-first
    dists: dict[int, TensorF64] = field(default_factory=dict)  # draft probs after node
    hidden: dict[int, TensorF64] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def path_to(self, node: int) -> list[int]:
        path = []
        while node >= 0:
            path.append(node)
            node = self.parents[node]
        return path[::-1]


@dataclass
class RootState:
    context: DraftContext
    root_token: int
    future_u: TensorF64 | None = None  # fused future slot vector


def _children_ranked(logp: TensorF64, k: int) -> list[tuple[int, float]]:
    order = torch.argsort(-logp, stable=True)[:k]
    return [(int(i), float(logp[i])) for i in order]


def build_draft_tree(
    head: DraftHead,
    root: RootState,
    budget: int,
    branch: int,
    max_depth: int | None = None,
) -> DraftTree:
    """Best-first tree of ``budget`` nodes (root included).

    A candidate is a top-``branch`` child of an existing node; the
    candidate with the highest cumulative draft log-prob joins next.  The
    result is the ``budget - 1`` most probable partial paths among those
    restricted to top-``branch`` children.
    """
    if budget < 1 or branch < 1:
        raise ConfigError("budget and branch must be >= 1")
    max_depth = budget if max_depth is None else max_depth
    ctx = root.context
    m = len(ctx)
    if m == 0:
        raise ContractError("drafting needs at least one context token")
    fk = fv = None
    if root.future_u is not None:
        fk, fv = head.kv(root.future_u.unsqueeze(0))

    def run(u: TensorF64, path_k: list[TensorF64], path_v: list[TensorF64], n_ctx: int):
        keys = [ctx.k[:n_ctx], *path_k]
        values = [ctx.v[:n_ctx], *path_v]
        if fk is not None:
            keys.append(fk)
            values.append(fv)
        keys = torch.cat(keys)
        values = torch.cat(values)
        mask = torch.ones(1, keys.shape[0], dtype=torch.bool)
        hidden = head.attend(u.unsqueeze(0), keys, values, mask)[0]
        return hidden, torch.log_softmax(head.logits(hidden), dim=-1)

    with torch.no_grad():
        feat_root, _ = run(ctx.u[m - 1], [], [], m)
        tok_emb = head.w("tok_emb")
        tokens = [int(root.root_token)]
        parents = [-1]
        depths = [0]
        logq = [0.0]
        cum = [0.0]
        children: list[list[int]] = [[]]
        slot_k: list[TensorF64] = []
        slot_v: list[TensorF64] = []
        dists: dict[int, TensorF64] = {}
        hidden: dict[int, TensorF64] = {}

        def expand(node: int, feature: TensorF64) -> None:
            u = head.fuse(tok_emb[tokens[node]], feature, m + depths[node])
            k, v = head.kv(u.unsqueeze(0))
            slot_k.append(k)
            slot_v.append(v)
            path = _path(parents, node)
            h, lp = run(u, [slot_k[i] for i in path], [slot_v[i] for i in path], m)
            hidden[node] = h
            dists[node] = lp.exp()
            if depths[node] < max_depth:
                for tok, l in _children_ranked(lp, branch):
                    heapq.heappush(heap, (-(cum[node] + l), next(counter), node, tok, l))

        counter = itertools.count()
        heap: list = []
        # slot keys are indexed by node id; nodes are expanded in creation order
        expand(0, feat_root)
        while len(tokens) < budget and heap:
            neg, _, parent, tok, l = heapq.heappop(heap)
            node = len(tokens)
            tokens.append(tok)
            parents.append(parent)
            depths.append(depths[parent] + 1)
            logq.append(l)
            cum.append(-neg)
            children.append([])
            children[parent].append(node)
            if len(tokens) < budget:
                expand(node, hidden[parent])
            else:
                slot_k.append(None)
                slot_v.append(None)
    tree = DraftTree(tokens, parents, depths, logq, cum, children, dists, hidden)
    return _breadth_first(tree)


def _path(parents: Sequence[int], node: int) -> list[int]:
    out = []
    while node >= 0:
        out.append(node)
        node = parents[node]
    return out[::-1]


def _breadth_first(tree: DraftTree) -> DraftTree:
    order = [0]
    for node in order:
        order.extend(tree.children[node])
    new = {old: i for i, old in enumerate(order)}
    return DraftTree(
        tokens=[tree.tokens[o] for o in order],
        parents=[-1 if tree.parents[o] < 0 else new[tree.parents[o]] for o in order],
        depths=[tree.depths[o] for o in order],
        logq=[tree.logq[o] for o in order],
        cum_logq=[tree.cum_logq[o] for o in order],
        children=[[new[c] for c in tree.children[o]] for o in order],
        dists={new[o]: d for o, d in tree.dists.items()},
        hidden={new[o]: h for o, h in tree.hidden.items()},
    )


def chain_tree(tokens: Sequence[int]) -> DraftTree:
    """A path tree over fixed tokens (root first); used by tests and oracles."""
    n = len(tokens)
    return DraftTree(
        tokens=list(tokens),
        parents=[i - 1 for i in range(n)],
        depths=list(range(n)),
        logq=[0.0] * n,
        cum_logq=[0.0] * n,
        children=[[i + 1] if i + 1 < n else [] for i in range(n)],
    )

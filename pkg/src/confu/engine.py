"""Speculative decoding loop with tree verification and contemplate insertion."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from .draft import DraftContext, DraftHead, DraftTree, RootState, build_draft_tree
from .errors import CapacityError, ConfigError, ContractError, ProposalError
from .future import ContemplateModule, FuturePrediction, expert_histogram, select_future
from .target import KVCache, TargetModel, VerifyResult, build_verify_mask

MODES = ("baseline", "confu")
RULES = ("lossless", "greedy-match")

# purpose tags for keyed random draws
ACCEPT, RESIDUAL, PREFILL, AUTOREG = 0, 1, 2, 3


@dataclass(frozen=True)
class DecodeMode:
    mode: str = "confu"
    temperature: float = 0.0
    rule: str = "lossless"
    nodes: int = 30
    branch: int = 4
    max_depth: int = 8

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if self.nodes < 1 or self.branch < 1 or self.max_depth < 0:
            raise ConfigError("need nodes >= 1, branch >= 1, max_depth >= 0")


class Chooser(Protocol):
    def bernoulli(self, prob: float, key: tuple[int, ...]) -> bool: ...

    def categorical(self, probs: np.ndarray, key: tuple[int, ...]) -> int: ...


class KeyedRNG:
    """Counter-style stream: every draw is a pure function of (seed, key).

    Keys are (round, node, purpose), so two runs that visit the same
    decision point consume the same uniform regardless of what else they
    computed in between.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)

    def uniform(self, key: tuple[int, ...]) -> float:
        return float(np.random.default_rng([self.seed, *key]).random())

    def bernoulli(self, prob: float, key: tuple[int, ...]) -> bool:
        return self.uniform(key) < prob

    def categorical(self, probs: np.ndarray, key: tuple[int, ...]) -> int:
        cdf = np.cumsum(probs)
        i = int(np.searchsorted(cdf, self.uniform(key) * cdf[-1], side="right"))
        return min(i, len(probs) - 1)


def target_probs(logits: torch.Tensor, temperature: float) -> np.ndarray:
    """Sampling distribution(s) from logits; temperature 0 is a point mass on the argmax."""
    z = logits.detach().numpy().astype(np.float64)
    if temperature == 0:
        out = np.zeros_like(z)
        np.put_along_axis(out, np.argmax(z, axis=-1)[..., None], 1.0, axis=-1)
        return out
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def residual(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    r = np.maximum(p - q, 0.0)
    total = r.sum()
    return p.copy() if total <= 0 else r / total


def accept_reject_path(
    draft_tokens: Sequence[int],
    q_dists: Sequence[np.ndarray],
    p_dists: Sequence[np.ndarray],
    chooser: Chooser,
    rule: str = "lossless",
    round_idx: int = 0,
) -> tuple[int, int]:
    """Verify one draft chain.

    ``p_dists`` has one more entry than ``draft_tokens``; the last one
    supplies the bonus token.  Returns (accepted count, next token), where
    the next token is the correction after a rejection or the bonus after
    full acceptance.
    """
    k = len(draft_tokens)
    if len(q_dists) != k or len(p_dists) != k + 1:
        raise ContractError("need K draft dists and K + 1 target dists")
    for i, x in enumerate(draft_tokens):
        p, q = p_dists[i], q_dists[i]
        if rule == "lossless":
            if q[x] <= 0:
                raise ProposalError(f"draft proposed token {x} with zero probability")
            if chooser.bernoulli(min(1.0, p[x] / q[x]), (round_idx, i + 1, ACCEPT)):
                continue
            return i, chooser.categorical(residual(p, q), (round_idx, i, RESIDUAL))
        if x == int(np.argmax(p)):
            continue
        return i, chooser.categorical(p, (round_idx, i, RESIDUAL))
    return k, chooser.categorical(p_dists[k], (round_idx, k, RESIDUAL))


def accept_tree(
    tree: DraftTree, p: np.ndarray, rule: str, chooser: Chooser, round_idx: int = 0
) -> tuple[list[int], int]:
    """Walk the tree from the root; returns (accepted node path, next token).

    Drafting is deterministic, so each candidate's proposal distribution is
    a point mass: under the lossless rule child ``x`` is accepted with
    probability ``r(x)`` and on rejection ``r`` loses ``x`` and is
    renormalized before the next sibling is tried.
    """
    node = 0
    path = [0]
    while True:
        r = p[node].copy()
        moved = False
        for child in tree.children[node]:
            x = tree.tokens[child]
            if rule == "lossless":
                if chooser.bernoulli(min(1.0, r[x]), (round_idx, child, ACCEPT)):
                    moved = True
                else:
                    r = residual(r, _point_mass(x, r.shape[0]))
            elif x == int(np.argmax(p[node])):
                moved = True
            if moved:
                node = child
                path.append(child)
                break
        if not moved:
            return path, chooser.categorical(r, (round_idx, node, RESIDUAL))


def _point_mass(x: int, n: int) -> np.ndarray:
    q = np.zeros(n)
    q[x] = 1.0
    return q


# ---------------------------------------------------------------------------


@dataclass
class RoundResult:
    accepted: list[int]  # accepted draft tokens (root excluded)
    next_token: int  # correction or bonus
    future: FuturePrediction | None
    draft_rows: int
    contemplate_rows: int

    @property
    def a(self) -> int:
        return len(self.accepted)

    @property
    def rows(self) -> tuple[int, int]:
        return self.draft_rows, self.contemplate_rows


@dataclass
class Metrics:
    tau: float = 0.0
    tokens: int = 0
    rounds: int = 0
    draft_rows: int = 0
    contemplate_rows: int = 0
    prefill_rows: int = 0
    wall_ns: int = 0
    truncated: bool = False
    accepted_per_round: list[int] = field(default_factory=list)
    con_experts: list[int] = field(default_factory=list)
    f_experts: list[int] = field(default_factory=list)

    @property
    def target_forwards(self) -> int:
        return self.rounds + 1

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "tokens": self.tokens,
            "rounds": self.rounds,
            "draft_rows": self.draft_rows,
            "contemplate_rows": self.contemplate_rows,
            "wall_ns": self.wall_ns,
        }


@dataclass
class GenState:
    tokens: list[int]  # committed tokens; the last one is pending (not cached yet)
    prompt_len: int
    cache: KVCache
    taps: torch.Tensor  # taps of cached tokens
    draft_ctx: DraftContext | None
    future: FuturePrediction | None
    round: int = 0

    def clone(self) -> "GenState":
        return GenState(
            tokens=list(self.tokens),
            prompt_len=self.prompt_len,
            cache=self.cache.clone(),
            taps=self.taps,
            draft_ctx=None if self.draft_ctx is None else self.draft_ctx.clone(),
            future=self.future,
            round=self.round,
        )

    @property
    def generated(self) -> list[int]:
        return self.tokens[self.prompt_len :]


@dataclass
class RoundPlan:
    tree: DraftTree
    verify: VerifyResult
    p: np.ndarray
    con_experts: np.ndarray | None = None
    f_experts: np.ndarray | None = None


@dataclass
class Pending:
    """Prefill output before the first token is sampled."""

    state: GenState
    p: np.ndarray
    rows: int


class SpeculativeDecoder:
    """Draft, verify, accept and hand the selected future to the next round."""

    def __init__(
        self,
        target: TargetModel,
        draft: DraftHead | None,
        mode: DecodeMode,
        contemplate: ContemplateModule | None = None,
        eos: int | None = None,
    ) -> None:
        self.target = target
        self.draft = draft
        self.mode = mode
        self.contemplate = contemplate
        self.eos = eos
        self.confu = mode.mode == "confu"
        if self.confu and (draft is None or not draft.future or contemplate is None):
            raise ConfigError("confu mode needs a future-aware draft head and a contemplate module")

    # -- stages -------------------------------------------------------------

    def start(self, prompt: Sequence[int]) -> Pending:
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ValueError("prompt must be non-empty")
        with torch.no_grad():
            if self.confu:
                res = self.target.prefill(
                    prompt, self.contemplate.soft, lambda tap: self.contemplate.embed(tap)[0]
                )
                future = FuturePrediction(res.future, -1)
            else:
                res = self.target.prefill(prompt)
                future = None
            ctx = None
            if self.draft is not None:
                ctx = DraftContext(self.draft)
                ctx.extend(prompt, res.taps)
        state = GenState(
            tokens=prompt, prompt_len=len(prompt), cache=res.cache, taps=res.taps, draft_ctx=ctx, future=future
        )
        return Pending(state, target_probs(res.logits, self.mode.temperature), res.rows)

    def max_tree_depth(self, state: GenState) -> int:
        """Deepest node that fits: node depth D sits at position m + D and its
        contemplate row at m + D + 1."""
        limit = self.target.config.max_seq_len - 1 - state.cache.length
        return limit - 1 if self.confu else limit

    def plan_round(self, state: GenState) -> RoundPlan | None:
        """Draft a tree and verify it; returns None when the cache is full."""
        mode = self.mode
        depth_cap = self.max_tree_depth(state)
        if depth_cap < 0:
            return None
        m = state.cache.length
        f_experts = con_experts = None
        with torch.no_grad():
            if self.draft is None or mode.nodes == 1:
                tree = DraftTree([state.tokens[-1]], [-1], [0], [0.0], [0.0], [[]])
            else:
                future_u = None
                if self.confu:
                    h_md = self.draft.down_project(state.taps[-1])
                    tok, feat, report = self.draft.future_parts(state.future.f, h_md)
                    future_u = self.draft.fuse(tok, feat, m)
                    f_experts = report.selected.numpy()
                root = RootState(state.draft_ctx, state.tokens[-1], future_u)
                tree = build_draft_tree(
                    self.draft, root, mode.nodes, mode.branch, min(mode.max_depth, depth_cap)
                )
            con = None
            if self.confu:
                emb, report = self.contemplate.embed(state.taps[-1])
                con = emb.expand(len(tree), -1)
                con_experts = report.selected.numpy()
            mask = build_verify_mask(tree.parents, state.cache.s, m, self.confu)
            ver = self.target.verify_tree(state.cache, tree.tokens, tree.parents, mask, con)
        return RoundPlan(tree, ver, target_probs(ver.logits, mode.temperature), con_experts, f_experts)

    def choose(self, plan: RoundPlan, chooser: Chooser, round_idx: int) -> tuple[list[int], int]:
        return accept_tree(plan.tree, plan.p, self.mode.rule, chooser, round_idx)

    def commit(self, state: GenState, plan: RoundPlan, path: list[int], next_token: int) -> RoundResult:
        """Append the accepted rows to the cache and the committed tokens (in place)."""
        ver = plan.verify
        idx = torch.tensor(path)
        with torch.no_grad():
            state.cache.append([k[idx] for k in ver.ks], [v[idx] for v in ver.vs])
            new_taps = ver.taps[idx]
            state.taps = torch.cat([state.taps, new_taps])
            if state.draft_ctx is not None:
                state.draft_ctx.extend([plan.tree.tokens[i] for i in path], new_taps)
        accepted = [plan.tree.tokens[i] for i in path[1:]]
        state.tokens.extend(accepted)
        state.tokens.append(int(next_token))
        state.future = select_future(ver.futures, path) if self.confu else None
        state.round += 1
        return RoundResult(accepted, int(next_token), state.future, ver.draft_rows, ver.contemplate_rows)

    def verify_round(self, state: GenState, chooser: Chooser) -> RoundResult | None:
        plan = self.plan_round(state)
        if plan is None:
            return None
        path, nxt = self.choose(plan, chooser, state.round + 1)
        return self.commit(state, plan, path, nxt)

    # -- full generation -------------------------------------------------------

    def generate(
        self, prompt: Sequence[int], max_tokens: int, seed: int = 0, chooser: Chooser | None = None
    ) -> tuple[list[int], Metrics]:
        if max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        chooser = KeyedRNG(seed) if chooser is None else chooser
        t0 = time.perf_counter_ns()
        metrics = Metrics()
        pending = self.start(prompt)
        metrics.prefill_rows = pending.rows
        state = pending.state
        state.tokens.append(chooser.categorical(pending.p, (0, 0, PREFILL)))
        con_sel: list[np.ndarray] = []
        f_sel: list[np.ndarray] = []
        while len(state.generated) < max_tokens and not self._hit_eos(state):
            plan = self.plan_round(state)
            if plan is None:
                metrics.truncated = True
                break
            path, nxt = self.choose(plan, chooser, state.round + 1)
            result = self.commit(state, plan, path, nxt)
            metrics.rounds += 1
            metrics.accepted_per_round.append(result.a + 1)
            metrics.draft_rows += result.draft_rows
            metrics.contemplate_rows += result.contemplate_rows
            if plan.con_experts is not None:
                con_sel.append(plan.con_experts)
            if plan.f_experts is not None:
                f_sel.append(plan.f_experts)
        out = state.generated[:max_tokens]
        if self.eos is not None and self.eos in out:
            out = out[: out.index(self.eos) + 1]
        metrics.tokens = len(out)
        metrics.tau = float(np.mean(metrics.accepted_per_round)) if metrics.rounds else 0.0
        metrics.wall_ns = time.perf_counter_ns() - t0
        if self.confu:
            metrics.con_experts = expert_histogram(con_sel, self.contemplate.moe.n_expert)
            metrics.f_experts = expert_histogram(f_sel, self.draft.moe.n_expert)
        return out, metrics

    def _hit_eos(self, state: GenState) -> bool:
        return self.eos is not None and self.eos in state.generated


def autoregressive_generate(
    target: TargetModel,
    prompt: Sequence[int],
    max_tokens: int,
    temperature: float,
    seed: int = 0,
    chooser: Chooser | None = None,
    eos: int | None = None,
) -> list[int]:
    """Plain target sampling with the KV cache (reference for spec decoding)."""
    chooser = KeyedRNG(seed) if chooser is None else chooser
    with torch.no_grad():
        res = target.prefill(prompt)
        cache = res.cache
        logits = res.logits
        out: list[int] = []
        for step in range(max_tokens):
            tok = chooser.categorical(target_probs(logits, temperature), (step, 0, AUTOREG))
            out.append(tok)
            if tok == eos or step == max_tokens - 1:
                break
            if cache.length >= target.config.max_seq_len:
                raise CapacityError("autoregressive decode ran out of positions")
            logits, _ = target.decode_step(cache, tok)
    return out

"""Losslessness certification: exact enumeration and Monte-Carlo chi-squared."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import stats

from .engine import PREFILL, SpeculativeDecoder, autoregressive_generate, target_probs
from .errors import ConfigError
from .target import TargetModel

EXHAUSTIVE_MAX_VOCAB = 8
EXHAUSTIVE_MAX_LEN = 4


class _Branch(Exception):
    def __init__(self, options):
        self.options = options


class ScriptedChooser:
    """Replays a fixed list of option indices, then signals the next branch point."""

    def __init__(self, script: Sequence[int]) -> None:
        self.script = script
        self.pos = 0
        self.prob = 1.0

    def _take(self, options: list[tuple[object, float]]):
        if self.pos == len(self.script):
            raise _Branch(options)
        value, p = options[self.script[self.pos]]
        self.pos += 1
        self.prob *= p
        return value

    def bernoulli(self, prob: float, key) -> bool:
        prob = min(max(prob, 0.0), 1.0)
        options = [(v, p) for v, p in ((True, prob), (False, 1.0 - prob)) if p > 0]
        return self._take(options)

    def categorical(self, probs: np.ndarray, key) -> int:
        total = probs.sum()
        return self._take([(i, p / total) for i, p in enumerate(probs) if p > 0])


def enumerate_outcomes(fn: Callable[[ScriptedChooser], object]) -> list[tuple[object, float]]:
    """Every outcome of a randomized procedure with its exact probability."""
    results = []
    stack: list[list[int]] = [[]]
    while stack:
        script = stack.pop()
        chooser = ScriptedChooser(script)
        try:
            out = fn(chooser)
        except _Branch as branch:
            stack.extend(script + [i] for i in range(len(branch.options)))
            continue
        results.append((out, chooser.prob))
    return results


def speculative_distribution(
    decoder: SpeculativeDecoder, prompt: Sequence[int], max_tokens: int
) -> dict[tuple[int, ...], float]:
    """Exact distribution of ``decoder.generate`` outputs.

    Drafting and verification are deterministic given the committed
    history, so only the sampling decisions branch; each branch is
    followed with a cloned decoder state.
    """
    dist: dict[tuple[int, ...], float] = defaultdict(float)
    pending = decoder.start(prompt)

    def finish(state, prob):
        out = state.generated[:max_tokens]
        if decoder.eos is not None and decoder.eos in out:
            out = out[: out.index(decoder.eos) + 1]
        dist[tuple(out)] += prob

    def recurse(state, prob):
        if len(state.generated) >= max_tokens or decoder._hit_eos(state):
            finish(state, prob)
            return
        plan = decoder.plan_round(state)
        if plan is None:
            finish(state, prob)
            return
        round_idx = state.round + 1
        for (path, nxt), p in enumerate_outcomes(lambda ch: decoder.choose(plan, ch, round_idx)):
            nxt_state = state.clone()
            decoder.commit(nxt_state, plan, path, nxt)
            recurse(nxt_state, prob * p)

    for tok, p in enumerate_outcomes(lambda ch: ch.categorical(pending.p, (0, 0, PREFILL))):
        state = pending.state.clone()
        state.tokens.append(tok)
        recurse(state, p)
    return dict(dist)


def autoregressive_distribution(
    target: TargetModel,
    prompt: Sequence[int],
    max_tokens: int,
    temperature: float,
    eos: int | None = None,
) -> dict[tuple[int, ...], float]:
    """Exact target sequence distribution by full (uncached) forwards on every prefix."""
    dist: dict[tuple[int, ...], float] = {}
    prompt = list(prompt)

    def recurse(seq: list[int], prob: float) -> None:
        if len(seq) == max_tokens or (eos is not None and seq and seq[-1] == eos):
            dist[tuple(seq)] = dist.get(tuple(seq), 0.0) + prob
            return
        with torch.no_grad():
            logits = target.forward_full(prompt + seq).logits[-1]
        p = target_probs(logits, temperature)
        for tok in np.nonzero(p > 0)[0]:
            recurse(seq + [int(tok)], prob * float(p[tok]))

    recurse([], 1.0)
    return dist


def total_variation(a: dict, b: dict) -> float:
    keys = set(a) | set(b)
    return 0.5 * sum(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)


@dataclass
class LosslessReport:
    method: str
    passed: bool
    statistic: float  # TV distance (exhaustive) or chi-squared p-value (Monte Carlo)
    threshold: float
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "passed": bool(self.passed),
            "statistic": float(self.statistic),
            "threshold": float(self.threshold),
            **self.detail,
        }


def verify_exhaustive(
    decoder: SpeculativeDecoder, prompt: Sequence[int], max_tokens: int, tol: float = 1e-9
) -> LosslessReport:
    vocab = decoder.target.config.vocab_size
    if vocab > EXHAUSTIVE_MAX_VOCAB or max_tokens > EXHAUSTIVE_MAX_LEN:
        raise ConfigError(
            f"exhaustive mode needs vocab <= {EXHAUSTIVE_MAX_VOCAB} and length <= "
            f"{EXHAUSTIVE_MAX_LEN}; got vocab {vocab}, length {max_tokens}"
        )
    spec = speculative_distribution(decoder, prompt, max_tokens)
    ref = autoregressive_distribution(
        decoder.target, prompt, max_tokens, decoder.mode.temperature, decoder.eos
    )
    tv = total_variation(spec, ref)
    return LosslessReport(
        "exhaustive", tv < tol, tv, tol, {"sequences": len(ref), "mass": sum(spec.values())}
    )


def chi2_homogeneity(a: Sequence[tuple], b: Sequence[tuple], min_expected: float = 5.0) -> float:
    """p-value that two samples of sequences share one distribution.

    Cells whose pooled expected count is below ``min_expected`` in either
    sample are merged into a single overflow cell.
    """
    ca: dict = defaultdict(int)
    cb: dict = defaultdict(int)
    for s in a:
        ca[s] += 1
    for s in b:
        cb[s] += 1
    na, nb = len(a), len(b)
    keys = sorted(set(ca) | set(cb))
    rows: list[list[int]] = []
    rest = [0, 0]
    for k in keys:
        pooled = ca[k] + cb[k]
        if min(pooled * na, pooled * nb) / (na + nb) < min_expected:
            rest[0] += ca[k]
            rest[1] += cb[k]
        else:
            rows.append([ca[k], cb[k]])
    if sum(rest):
        rows.append(rest)
    if len(rows) < 2:
        return 1.0
    return float(stats.chi2_contingency(np.array(rows).T)[1])


def verify_monte_carlo(
    decoder: SpeculativeDecoder,
    prompt: Sequence[int],
    max_tokens: int,
    trials: int,
    seed: int = 0,
    alpha: float = 0.001,
) -> LosslessReport:
    spec = []
    ref = []
    for i in range(trials):
        out, _ = decoder.generate(prompt, max_tokens, seed=seed + i)
        spec.append(tuple(out))
        ref.append(
            tuple(
                autoregressive_generate(
                    decoder.target, prompt, max_tokens, decoder.mode.temperature,
                    seed=seed + trials + i, eos=decoder.eos,
                )
            )
        )
    pval = chi2_homogeneity(spec, ref)
    return LosslessReport("monte-carlo", pval > alpha, pval, alpha, {"trials": trials})

"""Training: target pretraining, the baseline draft objective and the ConFu objective.

Draft losses are computed with a vectorized multi-step unroll that
mirrors inference drafting exactly.  For a base position ``b`` (the last
token whose target taps are known):

* step 1 queries the true slot ``b`` and predicts ``x[b+1]``;
* step ``i > 1`` queries a slot for the ground-truth token ``x[b+i-1]``
  whose feature is the draft's own output from step ``i - 1``;
* every step sees the true slots ``<= b``, the earlier unrolled slots of
  the same base and, in ConFu mode, one future slot.

Each step contributes KL(target || draft) against the target's
next-token distribution at position ``b + i - 1``.
"""
from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .checkpoint import Checkpoint
from .data import PAD
from .draft import DraftConfig, DraftHead
from .errors import ConfigError, DimensionError
from .future import ContemplateModule
from .nn import Adam, ParamStore, TensorF64, backward, clip_grad_norm
from .target import PassOutput, TargetConfig, TargetModel

STAGES = ("target-pretrain", "draft-baseline", "confu")
VARIANTS = ("confu", "confu-no-moe", "confu-no-moe-no-repl")
KL_EPS = 1e-12
_STAGE_IDS = {s: i for i, s in enumerate(STAGES)}


@dataclass(frozen=True)
class TrainConfig:
    unroll: int = 3  # L
    anchors: int = 8  # K_train
    window: int = 1  # replication window l
    min_gap: int = 0  # 0 means unroll + window + 1
    lr: float = 1e-3
    steps: int = 1000
    batch: int = 8
    clip: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.unroll < 1:
            raise ConfigError("unroll depth L must be >= 1")
        if self.window < 0 or self.anchors < 0:
            raise ConfigError("window l and anchor count must be >= 0")
        if self.min_gap == 0:
            object.__setattr__(self, "min_gap", self.unroll + self.window + 1)
        if self.min_gap < 1:
            raise ConfigError("min_gap must be >= 1")
        if self.steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ConfigError("need steps >= 0, batch >= 1 and lr > 0")


@dataclass(frozen=True)
class FutureConfig:
    """Target-side and draft-side ConFu sizes; ``variant`` names the ablation."""

    soft_prompts: int = 16
    n_expert: int = 8
    k_expert: int = 2
    variant: str = "confu"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")

    @classmethod
    def for_variant(cls, variant: str, **kw) -> "FutureConfig":
        if variant in ("confu-no-moe", "confu-no-moe-no-repl"):
            kw.update(n_expert=1, k_expert=1)
        return cls(variant=variant, **kw)


# ---------------------------------------------------------------------------
# anchors


def anchor_limit(seq_len: int, cfg: TrainConfig) -> int:
    """Largest anchor position whose window [t, t + l + L] stays in-sequence."""
    return seq_len - 1 - cfg.window - cfg.unroll


def _check_anchor_feasibility(seq_len: int, cfg: TrainConfig) -> int:
    k = cfg.anchors
    span = cfg.unroll + cfg.window + 1
    if k * span > seq_len:
        raise ConfigError(f"K_train={k} exceeds N/(l+L+1) = {seq_len}/{span}")
    free = anchor_limit(seq_len, cfg) - (k - 1) * (cfg.min_gap - 1) + 1
    if k and free < k:
        raise ConfigError(
            f"no feasible anchor set: N={seq_len}, K_train={k}, gap={cfg.min_gap}, "
            f"window={cfg.window}, L={cfg.unroll}"
        )
    return free


def sample_anchors(seq_len: int, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw over all sorted anchor sets with pairwise gaps >= ``min_gap``.

    Gap-compression maps feasible sets one-to-one onto ``K``-subsets of
    ``{0 .. free - 1}``, so a plain subset draw is uniform over sets.
    """
    free = _check_anchor_feasibility(seq_len, cfg)
    k = cfg.anchors
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    y = np.sort(rng.choice(free, size=k, replace=False))
    return (y + np.arange(k) * (cfg.min_gap - 1)).astype(np.int64)


def augmented_length(seq_len: int, anchors) -> int:
    return seq_len + int(np.asarray(anchors).shape[-1])


# ---------------------------------------------------------------------------
# KL


def kl_divergence(p: TensorF64, q: TensorF64, log_space: bool = False) -> TensorF64:
    """KL(p || q) in nats over the last axis, probabilities floored at 1e-12."""
    floor = math.log(KL_EPS)
    if log_space:
        logp, logq = p, q
        p = logp.exp()
        clamped = logq.detach() < floor
    else:
        clamped = q.detach() < KL_EPS
        logp, logq = torch.log(p.clamp_min(KL_EPS)), torch.log(q.clamp_min(KL_EPS))
    if bool((clamped & (p.detach() > KL_EPS)).any()):
        warnings.warn("draft probability below 1e-12 on target support; clamped", RuntimeWarning)
    return (p * (logp.clamp_min(floor) - logq.clamp_min(floor))).sum(dim=-1)


# ---------------------------------------------------------------------------
# batches and losses


@dataclass
class Models:
    target: TargetModel
    draft: DraftHead | None = None
    contemplate: ContemplateModule | None = None


@dataclass
class TrainBatch:
    """Token windows plus the frozen target's pass over them."""

    tokens: torch.Tensor  # (B, N)
    target: PassOutput
    target_logp: TensorF64  # (B, N, V)

    @classmethod
    def build(cls, target: TargetModel, tokens) -> "TrainBatch":
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        if tokens.dim() != 2:
            raise DimensionError("batch tokens must be (B, N)")
        with torch.no_grad():
            out = target.forward_full(tokens)
        return cls(tokens, out, torch.log_softmax(out.logits, dim=-1))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.tokens.shape)


@dataclass
class LossResult:
    terms: TensorF64  # (B, M, L) or (B, K, l + 1, L)
    augmented_length: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> TensorF64:
        return self.terms.sum()

    @property
    def mean(self) -> TensorF64:
        return self.terms.mean() if self.terms.numel() else self.terms.sum()

    @property
    def terms_per_anchor(self) -> int:
        return int(np.prod(self.terms.shape[2:]))


def draft_inputs(head: DraftHead, batch: TrainBatch):
    n = batch.tokens.shape[-1]
    u = head.token_slots(batch.tokens, head.down_project(batch.target.taps), torch.arange(n))
    k, v = head.kv(u)
    return u, k, v


def unroll(
    head: DraftHead,
    batch: TrainBatch,
    bases: torch.Tensor,
    depth: int,
    future_u: TensorF64 | None = None,
    inputs=None,
) -> TensorF64:
    """KL terms (B, M, depth) of the multi-step draft unroll from ``bases`` (B, M)."""
    tokens = batch.tokens
    B, N = tokens.shape
    M = bases.shape[1]
    if M and int(bases.max()) + depth - 1 > N - 1:
        raise ConfigError("unroll runs past the end of the sequence")
    u, k, v = inputs if inputs is not None else draft_inputs(head, batch)
    d = u.shape[-1]
    rows = torch.arange(B).unsqueeze(1)
    true_k = k.unsqueeze(1).expand(B, M, N, d)
    true_v = v.unsqueeze(1).expand(B, M, N, d)
    true_mask = torch.arange(N).view(1, 1, N) <= bases.unsqueeze(-1)
    tail_k: list[TensorF64] = []
    tail_v: list[TensorF64] = []
    if future_u is not None:
        fk, fv = head.kv(future_u)
    query = u[rows, bases]
    terms = []
    for i in range(1, depth + 1):
        keys = [true_k, *tail_k]
        values = [true_v, *tail_v]
        if future_u is not None:
            keys.append(fk.unsqueeze(2))
            values.append(fv.unsqueeze(2))
        keys = torch.cat(keys, dim=2)
        values = torch.cat(values, dim=2)
        extra = torch.ones(B, M, keys.shape[2] - N, dtype=torch.bool)
        mask = torch.cat([true_mask, extra], dim=-1).unsqueeze(-2).unsqueeze(-3)
        hidden = head.attend(query.unsqueeze(2), keys, values, mask)[:, :, 0]
        logq = torch.log_softmax(head.logits(hidden), dim=-1)
        logp = batch.target_logp[rows, bases + i - 1]
        terms.append(kl_divergence(logp, logq, log_space=True))
        if i < depth:
            pos = bases + i
            query = head.fuse(head.w("tok_emb")[tokens[rows, pos]], hidden, pos)
            nk, nv = head.kv(query)
            tail_k.append(nk.unsqueeze(2))
            tail_v.append(nv.unsqueeze(2))
    return torch.stack(terms, dim=-1)


def all_bases(seq_len: int, depth: int, batch: int) -> torch.Tensor:
    return torch.arange(seq_len - depth + 1).expand(batch, -1)


def loss_eagle3(
    batch: TrainBatch, depth: int, head: DraftHead, bases: torch.Tensor | None = None
) -> LossResult:
    """Baseline multi-step objective; every feasible position is a base by default."""
    B, N = batch.shape
    if bases is None:
        bases = all_bases(N, depth, B)
    return LossResult(unroll(head, batch, bases, depth), augmented_length=N)


@dataclass
class FutureInputs:
    """Per-anchor pieces of the draft future slot (before position encoding)."""

    token_part: TensorF64  # (B, K, d) [f] MoE output
    feature_part: TensorF64  # (B, K, d) projected future prediction
    futures: TensorF64  # (B, K, d) raw contemplate-row outputs
    con_selected: torch.Tensor
    f_selected: torch.Tensor


def anchor_futures(models: Models, batch: TrainBatch, anchors: torch.Tensor) -> FutureInputs:
    """Contemplate rows after each anchor, then both MoE embeddings."""
    rows = torch.arange(anchors.shape[0]).unsqueeze(1)
    taps = batch.target.taps[rows, anchors]
    con, con_report = models.contemplate.embed(taps)
    f = models.target.contemplate_at(batch.target, models.contemplate.soft, con, anchors)
    tok, feat, f_report = models.draft.future_parts(f, models.draft.down_project(taps))
    return FutureInputs(tok, feat, f, con_report.selected, f_report.selected)


def loss_confu(
    batch: TrainBatch,
    cfg: TrainConfig,
    models: Models,
    anchors: torch.Tensor,
    use_future: bool = True,
) -> LossResult:
    """Anchor-window objective with future replication.

    Terms are indexed (B, K, j, i): anchor, replication offset ``j`` in
    ``0..l`` and unroll step ``i``.  Every offset of one anchor reuses that
    anchor's future; the future slot's position is the current length,
    ``anchor + j + 1``.  ``use_future=False`` drops the future slot, which
    yields the baseline objective restricted to the same windows.
    """
    anchors = torch.as_tensor(np.asarray(anchors), dtype=torch.long)
    B, N = batch.shape
    K = anchors.shape[-1]
    if anchors.shape[0] != B:
        raise DimensionError("need one anchor row per sequence")
    L, l = cfg.unroll, cfg.window
    if K == 0:
        return LossResult(torch.zeros(B, 0, l + 1, L, dtype=torch.float64), augmented_length=N)
    if int(anchors.max()) > anchor_limit(N, cfg):
        raise ConfigError("anchor window runs past the end of the sequence")
    head = models.draft
    inputs = draft_inputs(head, batch)
    fut = anchor_futures(models, batch, anchors) if use_future else None
    per_offset = []
    for j in range(l + 1):
        future_u = None
        if fut is not None:
            future_u = head.fuse(fut.token_part, fut.feature_part, anchors + j + 1)
        per_offset.append(unroll(head, batch, anchors + j, L, future_u, inputs))
    extra = {}
    if fut is not None:
        extra = {"con_selected": fut.con_selected, "f_selected": fut.f_selected}
    return LossResult(torch.stack(per_offset, dim=2), augmented_length=N + K, extra=extra)


def loss_target(model: TargetModel, tokens) -> TensorF64:
    """Mean next-token cross-entropy, ignoring PAD targets."""
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    logits = model.forward_full(tokens[:, :-1]).logits
    logp = torch.log_softmax(logits, dim=-1)
    nxt = tokens[:, 1:]
    nll = -logp.gather(-1, nxt.unsqueeze(-1)).squeeze(-1)
    keep = (nxt != PAD).to(nll.dtype)
    return (nll * keep).sum() / keep.sum().clamp_min(1.0)


# ---------------------------------------------------------------------------
# model construction from configs and checkpoints


def build_models(
    target_cfg: TargetConfig,
    draft_cfg: DraftConfig | None = None,
    future_cfg: FutureConfig | None = None,
    seed: int = 0,
) -> Models:
    target = TargetModel(target_cfg, seed=seed)
    models = Models(target)
    if draft_cfg is not None:
        models.draft = _draft_for(target, draft_cfg, future_cfg, seed)
    if future_cfg is not None:
        models.contemplate = _contemplate_for(target, future_cfg, seed)
    return models


def _draft_for(target, draft_cfg, future_cfg, seed) -> DraftHead:
    if future_cfg is None:
        return DraftHead(draft_cfg, target, future=False, seed=seed + 11)
    return DraftHead(
        draft_cfg, target, future=True, seed=seed + 11,
        n_expert=future_cfg.n_expert, k_expert=future_cfg.k_expert,
    )


def _contemplate_for(target, future_cfg, seed) -> ContemplateModule:
    tc = target.config
    return ContemplateModule(
        tc.n_layers, tc.d_model, future_cfg.soft_prompts, future_cfg.n_expert,
        future_cfg.k_expert, seed=seed + 23, center=target.tok_emb.detach().mean(dim=0),
    )


def _all_tensors(models: Models) -> dict[str, TensorF64]:
    out = dict(models.target.store.state_dict())
    if models.draft is not None:
        out.update(models.draft.store.state_dict())
    if models.contemplate is not None:
        out.update(models.contemplate.store.state_dict())
    return out


def config_echo(models: Models, train_cfg: TrainConfig | None, future_cfg: FutureConfig | None):
    echo = {"target": asdict(models.target.config)}
    if models.draft is not None:
        echo["draft"] = asdict(models.draft.config)
    if future_cfg is not None:
        echo["future"] = asdict(future_cfg)
    if train_cfg is not None:
        echo["train"] = asdict(train_cfg)
    return echo


def models_from_checkpoint(ckpt: Checkpoint) -> Models:
    cfg = ckpt.config
    if "target" not in cfg:
        raise ConfigError("checkpoint carries no target config")
    tc = TargetConfig(**{**cfg["target"], "tap_layers": tuple(cfg["target"]["tap_layers"])})
    dc = DraftConfig(**cfg["draft"]) if "draft" in cfg else None
    fc = FutureConfig(**cfg["future"]) if "future" in cfg else None
    models = build_models(tc, dc, fc)
    models.target.store.load_state_dict(ckpt.subset(models.target.prefix + "."))
    models.target.freeze()
    if models.draft is not None:
        models.draft.store.load_state_dict(
            {k: v for k, v in ckpt.tensors.items() if k in models.draft.store}
        )
    if models.contemplate is not None:
        models.contemplate.store.load_state_dict(
            {k: v for k, v in ckpt.tensors.items() if k in models.contemplate.store}
        )
    return models


# ---------------------------------------------------------------------------
# the training loop


class JsonlLog:
    """Per-step {step, stage, loss} records; kept in memory and optionally on disk."""

    def __init__(self, path: str | os.PathLike | None = None) -> None:
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            open(path, "w").close()

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


def _fit(
    stage: str,
    store: ParamStore,
    cfg: TrainConfig,
    step_loss: Callable[[np.random.Generator], TensorF64],
    log: JsonlLog,
) -> None:
    opt = Adam(cfg.lr)
    rng = np.random.default_rng([cfg.seed, _STAGE_IDS[stage]])
    for step in range(1, cfg.steps + 1):
        loss = step_loss(rng)
        backward(loss, store)
        clip_grad_norm(store, cfg.clip)
        opt.step(store)
        log.write({"step": step, "stage": stage, "loss": float(loss.detach())})


def _batch_rows(rng: np.random.Generator, corpus: np.ndarray, batch: int) -> np.ndarray:
    return corpus[rng.integers(0, corpus.shape[0], size=batch)]


def train_target(
    corpus: np.ndarray, target_cfg: TargetConfig, cfg: TrainConfig, log: JsonlLog | None = None
) -> Checkpoint:
    log = log or JsonlLog()
    models = Models(TargetModel(target_cfg, seed=cfg.seed))
    store = models.target.store
    _fit("target-pretrain", store, cfg, lambda rng: loss_target(models.target, _batch_rows(rng, corpus, cfg.batch)), log)
    models.target.freeze()
    return Checkpoint(_all_tensors(models), config_echo(models, cfg, None), "target-pretrain", cfg.steps)


def _require(init: Checkpoint | None, stage: str, needed: str) -> Checkpoint:
    if init is None or init.stage != needed:
        got = None if init is None else init.stage or "unknown"
        raise ConfigError(f"stage {stage!r} needs a {needed!r} checkpoint, got {got!r}")
    return init


def train_draft(
    corpus: np.ndarray,
    init: Checkpoint | None,
    draft_cfg: DraftConfig,
    cfg: TrainConfig,
    log: JsonlLog | None = None,
) -> Checkpoint:
    log = log or JsonlLog()
    init = _require(init, "draft-baseline", "target-pretrain")
    models = models_from_checkpoint(init)
    models.draft = _draft_for(models.target, draft_cfg, None, cfg.seed)
    head = models.draft

    def step_loss(rng):
        batch = TrainBatch.build(models.target, _batch_rows(rng, corpus, cfg.batch))
        return loss_eagle3(batch, cfg.unroll, head).mean

    _fit("draft-baseline", head.store, cfg, step_loss, log)
    return Checkpoint(_all_tensors(models), config_echo(models, cfg, None), "draft-baseline", cfg.steps)


def train_confu(
    corpus: np.ndarray,
    init: Checkpoint | None,
    future_cfg: FutureConfig,
    cfg: TrainConfig,
    log: JsonlLog | None = None,
) -> Checkpoint:
    """Continue from a baseline draft with the future slot and contemplate path."""
    log = log or JsonlLog()
    init = _require(init, "confu", "draft-baseline")
    if future_cfg.variant == "confu-no-moe-no-repl" and cfg.window != 0:
        cfg = replace(cfg, window=0, min_gap=0)
    base = models_from_checkpoint(init)
    models = Models(base.target)
    models.draft = _draft_for(base.target, base.draft.config, future_cfg, cfg.seed)
    models.draft.store.load_state_dict(base.draft.store.state_dict(), strict=False)
    models.contemplate = _contemplate_for(base.target, future_cfg, cfg.seed)
    store = ParamStore.union(models.draft.store, models.contemplate.store)
    n = corpus.shape[1]
    _check_anchor_feasibility(n, cfg)

    def step_loss(rng):
        rows = _batch_rows(rng, corpus, cfg.batch)
        anchors = np.stack([sample_anchors(n, cfg, rng) for _ in range(cfg.batch)])
        batch = TrainBatch.build(models.target, rows)
        return loss_confu(batch, cfg, models, torch.from_numpy(anchors)).mean

    _fit("confu", store, cfg, step_loss, log)
    return Checkpoint(_all_tensors(models), config_echo(models, cfg, future_cfg), "confu", cfg.steps)


def train(stage: str, corpus: np.ndarray, cfg: TrainConfig, **kw) -> Checkpoint:
    """Dispatch by stage name; keyword arguments follow the per-stage functions."""
    if stage == "target-pretrain":
        return train_target(corpus, kw["target_cfg"], cfg, kw.get("log"))
    if stage == "draft-baseline":
        return train_draft(corpus, kw.get("init"), kw.get("draft_cfg", DraftConfig()), cfg, kw.get("log"))
    if stage == "confu":
        return train_confu(corpus, kw.get("init"), kw.get("future_cfg", FutureConfig()), cfg, kw.get("log"))
    raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")

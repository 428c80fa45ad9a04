"""Tiny decoder-only target LM with a KV cache, soft-prompt region and hidden taps.

Ordinary rows and contemplate rows are computed in two groups per pass.
Ordinary rows never attend to soft-prompt or contemplate columns, so the
group split is exact, and it keeps ordinary hidden states bit-identical
whether or not contemplate rows ride along.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .errors import CapacityError, ConfigError, DimensionError, MaskError
from .future import SoftPromptSet
from .nn import (
    DTYPE,
    ParamStore,
    TensorF64,
    causal_mask,
    check_mask,
    gelu,
    masked_attention,
    merge_heads,
    normal,
    rms_norm,
    seeded_generator,
    split_heads,
)


@dataclass(frozen=True)
class TargetConfig:
    vocab_size: int = 259
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    max_seq_len: int = 128
    d_ff: int = 0
    tap_layers: tuple[int, int, int] | None = None

    def __post_init__(self) -> None:
        if self.n_layers < 2:
            raise ConfigError("target needs at least 2 layers")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.tap_layers is None:
            n = self.n_layers
            # -1 taps the embedding output so 2-layer models still get 3 distinct taps
            taps = (0, n // 2, n - 1) if n >= 3 else (-1, 0, 1)
            object.__setattr__(self, "tap_layers", taps)
        taps = tuple(int(t) for t in self.tap_layers)
        object.__setattr__(self, "tap_layers", taps)
        if len(taps) != 3 or not (taps[0] < taps[1] < taps[2]):
            raise ConfigError(f"tap_layers must be 3 strictly increasing indices, got {taps}")
        if taps[2] != self.n_layers - 1 or taps[0] < -1:
            raise ConfigError(f"tap_layers {taps} must end at the final layer")


class KVCache:
    """Per-layer key/value rows: ``s`` soft-prompt rows, then content rows.

    Content rows are append-only; :meth:`truncate` rolls back to an earlier
    length (used when a generation restarts from a shorter prefix).
    """

    def __init__(self, config: TargetConfig, soft_prompts: SoftPromptSet | None = None) -> None:
        self.config = config
        self.s = 0 if soft_prompts is None else soft_prompts.s
        rows = self.s + config.max_seq_len
        self.k = [torch.zeros(rows, config.d_model, dtype=DTYPE) for _ in range(config.n_layers)]
        self.v = [torch.zeros(rows, config.d_model, dtype=DTYPE) for _ in range(config.n_layers)]
        self.length = 0
        if soft_prompts is not None and self.s:
            with torch.no_grad():
                for layer in range(config.n_layers):
                    self.k[layer][: self.s] = soft_prompts.keys(layer).detach()
                    self.v[layer][: self.s] = soft_prompts.values(layer).detach()

    @property
    def content_len(self) -> int:
        return self.length

    def rows(self, layer: int) -> int:
        return self.s + self.length

    def content(self, layer: int) -> tuple[TensorF64, TensorF64]:
        end = self.s + self.length
        return self.k[layer][self.s : end], self.v[layer][self.s : end]

    def soft(self, layer: int) -> tuple[TensorF64, TensorF64]:
        return self.k[layer][: self.s], self.v[layer][: self.s]

    def append(self, ks: Sequence[TensorF64], vs: Sequence[TensorF64]) -> None:
        n = ks[0].shape[0]
        if self.length + n > self.config.max_seq_len:
            raise CapacityError(
                f"cache overflow: {self.length} + {n} > {self.config.max_seq_len}"
            )
        start = self.s + self.length
        with torch.no_grad():
            for layer in range(self.config.n_layers):
                self.k[layer][start : start + n] = ks[layer]
                self.v[layer][start : start + n] = vs[layer]
        self.length += n

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ValueError(f"cannot truncate cache of length {self.length} to {length}")
        self.length = length

    def clone(self) -> "KVCache":
        out = KVCache.__new__(KVCache)
        out.config = self.config
        out.s = self.s
        out.k = [t.clone() for t in self.k]
        out.v = [t.clone() for t in self.v]
        out.length = self.length
        return out


@dataclass
class PassOutput:
    logits: TensorF64  # (..., R, V)
    taps: TensorF64  # (..., R, 3d)
    hidden: TensorF64  # final-layer post-block state (..., R, d)
    ks: list[TensorF64]  # per-layer keys of the new rows
    vs: list[TensorF64]


@dataclass
class PrefillResult:
    logits: TensorF64  # next-token logits at the last ordinary token
    taps: TensorF64  # (t, 3d)
    future: TensorF64 | None  # contemplate row's final hidden state
    cache: KVCache
    rows: int  # s + t + (1 if contemplate)
    con_embed: TensorF64 | None = None


@dataclass
class VerifyResult:
    logits: TensorF64  # (T, V) next-token logits after each node
    taps: TensorF64  # (T, 3d)
    futures: TensorF64 | None  # (T, d)
    ks: list[TensorF64]  # per-layer (T, d) keys of the draft rows
    vs: list[TensorF64]
    draft_rows: int
    contemplate_rows: int = 0

    @property
    def rows(self) -> int:
        return self.draft_rows + self.contemplate_rows


def build_verify_mask(
    parents: Sequence[int], s: int, t: int, contemplate: bool
) -> torch.Tensor:
    """Tree mask over columns [soft (s) | cache (t) | draft (T) | contemplate (T)].

    Draft rows see the cache, their ancestors and themselves.  A
    contemplate row sees what its draft row sees, plus its draft row, the
    soft prompts and itself.  Without contemplate rows the soft and
    contemplate column blocks are dropped.
    """
    n = len(parents)
    tree = torch.zeros(n, n, dtype=torch.bool)
    for i, p in enumerate(parents):
        if p >= i:
            raise DimensionError(f"parent index {p} must precede node {i}")
        if p >= 0:
            tree[i] = tree[p]
        tree[i, i] = True
    if not contemplate:
        return torch.cat([torch.ones(n, t, dtype=torch.bool), tree], dim=1)
    cols = s + t + 2 * n
    mask = torch.zeros(2 * n, cols, dtype=torch.bool)
    mask[:n, s : s + t] = True
    mask[:n, s + t : s + t + n] = tree
    mask[n:, :s] = True
    mask[n:, s : s + t] = True
    mask[n:, s + t : s + t + n] = tree
    mask[n:, s + t + n :] = torch.eye(n, dtype=torch.bool)
    return mask


class TargetModel:
    """Pre-norm RMSNorm decoder with learned absolute positions."""

    def __init__(self, config: TargetConfig, seed: int = 0, prefix: str = "target") -> None:
        self.config = config
        self.prefix = prefix
        self.store = ParamStore()
        g = seeded_generator(seed)
        c = config
        d = c.d_model
        std = 0.02
        p = prefix
        self.store.add(f"{p}.tok_emb", normal((c.vocab_size, d), std, g))
        self.store.add(f"{p}.pos_emb", normal((c.max_seq_len, d), std, g))
        proj_std = std / (2 * c.n_layers) ** 0.5
        for i in range(c.n_layers):
            self.store.add(f"{p}.l{i}.norm1", torch.ones(d, dtype=DTYPE))
            for w in ("wq", "wk", "wv"):
                self.store.add(f"{p}.l{i}.{w}", normal((d, d), std, g))
            self.store.add(f"{p}.l{i}.wo", normal((d, d), proj_std, g))
            self.store.add(f"{p}.l{i}.norm2", torch.ones(d, dtype=DTYPE))
            self.store.add(f"{p}.l{i}.w1", normal((c.d_ff, d), std, g))
            self.store.add(f"{p}.l{i}.w2", normal((d, c.d_ff), proj_std, g))
        self.store.add(f"{p}.norm_f", torch.ones(d, dtype=DTYPE))
        self.store.add(f"{p}.lm_head", normal((c.vocab_size, d), std, g))

    # -- parameter access -------------------------------------------------

    def w(self, name: str) -> TensorF64:
        return self.store[f"{self.prefix}.{name}"]

    @property
    def tok_emb(self) -> TensorF64:
        return self.w("tok_emb")

    @property
    def pos_emb(self) -> TensorF64:
        return self.w("pos_emb")

    def freeze(self) -> None:
        self.store.freeze()

    # -- core layer math --------------------------------------------------

    def embed(self, tokens: torch.Tensor, positions: torch.Tensor) -> TensorF64:
        if int(positions.max()) >= self.config.max_seq_len:
            raise CapacityError(
                f"position {int(positions.max())} exceeds max_seq_len {self.config.max_seq_len}"
            )
        return self.tok_emb[tokens] + self.pos_emb[positions]

    def _qkv(self, layer: int, x: TensorF64):
        h = rms_norm(x, self.w(f"l{layer}.norm1"))
        return h @ self.w(f"l{layer}.wq").T, h @ self.w(f"l{layer}.wk").T, h @ self.w(f"l{layer}.wv").T

    def _finish(self, layer: int, x: TensorF64, q, keys, values, mask) -> TensorF64:
        H = self.config.n_heads
        if mask.dim() > 2:
            mask = mask.unsqueeze(-3)  # broadcast over heads, not over the batch
        att = masked_attention(split_heads(q, H), split_heads(keys, H), split_heads(values, H), mask)
        x = x + merge_heads(att) @ self.w(f"l{layer}.wo").T
        h = rms_norm(x, self.w(f"l{layer}.norm2"))
        return x + gelu(h @ self.w(f"l{layer}.w1").T) @ self.w(f"l{layer}.w2").T

    def head(self, hidden: TensorF64) -> TensorF64:
        return rms_norm(hidden, self.w("norm_f")) @ self.w("lm_head").T

    def _taps(self, x0: TensorF64, outs: list[TensorF64]) -> TensorF64:
        layers = [x0 if i < 0 else outs[i] for i in self.config.tap_layers]
        return torch.cat(layers, dim=-1)

    def run_rows(
        self,
        x: TensorF64,
        mask: torch.Tensor,
        prefix_kv: Callable[[int], tuple[TensorF64, TensorF64]] | None = None,
    ) -> PassOutput:
        """Run new rows ``x`` (..., R, d) through every layer.

        Row i may attend to the per-layer prefix rows returned by
        ``prefix_kv(layer)`` and to the new rows, as allowed by ``mask``
        (..., R, P + R).
        """
        x0 = x
        outs: list[TensorF64] = []
        ks: list[TensorF64] = []
        vs: list[TensorF64] = []
        for layer in range(self.config.n_layers):
            q, k, v = self._qkv(layer, x)
            ks.append(k)
            vs.append(v)
            if prefix_kv is not None:
                pk, pv = prefix_kv(layer)
                if pk.dim() < k.dim():
                    pk = pk.expand(*k.shape[:-2], *pk.shape[-2:])
                    pv = pv.expand(*v.shape[:-2], *pv.shape[-2:])
                keys = torch.cat([pk, k], dim=-2)
                values = torch.cat([pv, v], dim=-2)
            else:
                keys, values = k, v
            x = self._finish(layer, x, q, keys, values, mask)
            outs.append(x)
        return PassOutput(
            logits=self.head(x), taps=self._taps(x0, outs), hidden=x, ks=ks, vs=vs
        )

    # -- no-cache reference ------------------------------------------------

    def forward_full(self, tokens: Sequence[int] | torch.Tensor) -> PassOutput:
        """Plain causal forward over ``tokens`` (..., N) with no cache."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        n = tokens.shape[-1]
        if n > self.config.max_seq_len:
            raise CapacityError(f"sequence length {n} exceeds max_seq_len")
        x = self.embed(tokens, torch.arange(n))
        return self.run_rows(x, causal_mask(n))

    # -- contemplate rows ------------------------------------------------------

    def _contemplate_rows(
        self,
        con_x: TensorF64,
        soft: SoftPromptSet | KVCache | None,
        ctx_kv: Callable[[int], tuple[TensorF64, TensorF64]],
        ctx_mask: torch.Tensor,
    ) -> TensorF64:
        """Final hidden state of contemplate rows.

        ``ctx_mask`` (..., Rc, C) says which context rows each contemplate
        row sees; every contemplate row also sees all soft-prompt rows and
        itself (and no other contemplate row).
        """
        rc = con_x.shape[-2]
        s = 0 if soft is None else soft.s

        def prefix(layer: int):
            ck, cv = ctx_kv(layer)
            if soft is None or s == 0:
                return ck, cv
            if isinstance(soft, KVCache):
                sk, sv = soft.soft(layer)
            else:
                sk, sv = soft.keys(layer), soft.values(layer)
            if ck.dim() > 2:
                sk = sk.expand(*ck.shape[:-2], *sk.shape)
                sv = sv.expand(*cv.shape[:-2], *sv.shape)
            return torch.cat([sk, ck], dim=-2), torch.cat([sv, cv], dim=-2)

        lead = ctx_mask.shape[:-2]
        soft_cols = torch.ones(*lead, rc, s, dtype=torch.bool)
        eye = torch.eye(rc, dtype=torch.bool).expand(*lead, rc, rc)
        mask = torch.cat([soft_cols, ctx_mask, eye], dim=-1)
        return self.run_rows(con_x, mask, prefix).hidden

    # -- inference passes -------------------------------------------------------

    def prefill(
        self,
        tokens: Sequence[int],
        soft_prompts: SoftPromptSet | None = None,
        con_embed: TensorF64 | Callable[[TensorF64], TensorF64] | None = None,
    ) -> PrefillResult:
        """Process the prompt, optionally with one trailing contemplate row.

        ``con_embed`` is either the contemplate input embedding or a callable
        mapping the last prompt token's concatenated tap to it.
        """
        tokens = torch.as_tensor(list(tokens), dtype=torch.long)
        t = tokens.shape[0]
        if t == 0:
            raise ValueError("prompt must be non-empty")
        if t > self.config.max_seq_len - 1:
            raise CapacityError(f"prompt length {t} exceeds max_seq_len - 1")
        cache = KVCache(self.config, soft_prompts)
        out = self.run_rows(self.embed(tokens, torch.arange(t)), causal_mask(t))
        cache.append(out.ks, out.vs)
        future = None
        con = None
        rows = t + cache.s
        if con_embed is not None:
            con = con_embed(out.taps[-1]) if callable(con_embed) else con_embed
            if con.shape[-1] != self.config.d_model:
                raise DimensionError(f"contemplate embedding must have {self.config.d_model} entries")
            con_x = (con + self.pos_emb[t]).reshape(1, -1)
            future = self._contemplate_rows(
                con_x, cache, cache.content, torch.ones(1, t, dtype=torch.bool)
            )[0]
            rows += 1
        return PrefillResult(
            logits=out.logits[-1], taps=out.taps, future=future, cache=cache, rows=rows, con_embed=con
        )

    def decode_step(self, cache: KVCache, token: int) -> tuple[TensorF64, TensorF64]:
        t = cache.length
        if t + 1 > self.config.max_seq_len:
            raise CapacityError("cache is full")
        x = self.embed(torch.tensor([token]), torch.tensor([t]))
        out = self.run_rows(x, torch.ones(1, t + 1, dtype=torch.bool), cache.content)
        cache.append(out.ks, out.vs)
        return out.logits[0], out.taps[0]

    def verify_tree(
        self,
        cache: KVCache,
        tokens: Sequence[int],
        parents: Sequence[int],
        mask: torch.Tensor,
        con_embeds: TensorF64 | None = None,
    ) -> VerifyResult:
        """One pass over T draft rows (+ T contemplate rows when embeddings are given).

        ``mask`` must come in the layout of :func:`build_verify_mask`.  Draft
        rows may not see soft-prompt or contemplate columns.
        """
        n = len(tokens)
        if len(parents) != n or n == 0:
            raise DimensionError("tree tokens and parents must be non-empty and aligned")
        t = cache.length
        s = cache.s
        depth = torch.zeros(n, dtype=torch.long)
        for i, p in enumerate(parents):
            if p >= 0:
                depth[i] = depth[p] + 1
        positions = t + depth
        contemplate = con_embeds is not None
        if contemplate:
            check_mask(mask, 2 * n, s + t + 2 * n)
            if con_embeds.shape[0] != n:
                raise DimensionError(f"need {n} contemplate embeddings, got {con_embeds.shape[0]}")
            draft_mask = mask[:n]
            if bool(draft_mask[:, :s].any()) or bool(draft_mask[:, s + t + n :].any()):
                raise MaskError("draft rows must not attend to soft-prompt or contemplate rows")
            draft_mask = draft_mask[:, s : s + t + n]
            con_mask = mask[n:]
            if not bool(con_mask[:, :s].all()) or not torch.equal(
                con_mask[:, s + t + n :], torch.eye(n, dtype=torch.bool)
            ):
                raise MaskError("contemplate rows must see all soft prompts and only themselves")
            if int(positions.max()) + 1 >= self.config.max_seq_len:
                raise CapacityError("contemplate positions exceed max_seq_len")
        else:
            check_mask(mask, n, t + n)
            draft_mask = mask
        x = self.embed(torch.as_tensor(list(tokens), dtype=torch.long), positions)
        out = self.run_rows(x, draft_mask, cache.content)
        futures = None
        if contemplate:
            con_x = con_embeds + self.pos_emb[positions + 1]

            def ctx(layer: int):
                ck, cv = cache.content(layer)
                return torch.cat([ck, out.ks[layer]]), torch.cat([cv, out.vs[layer]])

            futures = self._contemplate_rows(con_x, cache, ctx, mask[n:, s : s + t + n])
        return VerifyResult(
            logits=out.logits,
            taps=out.taps,
            futures=futures,
            ks=out.ks,
            vs=out.vs,
            draft_rows=n,
            contemplate_rows=n if contemplate else 0,
        )

    # -- training helpers -------------------------------------------------------

    def contemplate_at(
        self,
        pass_out: PassOutput,
        soft: SoftPromptSet | None,
        con_embeds: TensorF64,
        anchors: torch.Tensor,
    ) -> TensorF64:
        """Futures for contemplate rows inserted after ``anchors`` (B, K).

        ``pass_out`` is a batched causal pass over (B, N) tokens; a
        contemplate row after anchor ``a`` sits at position ``a + 1`` and
        sees ordinary positions ``<= a``.
        """
        n = pass_out.taps.shape[-2]
        con_x = con_embeds + self.pos_emb[anchors + 1]
        ctx_mask = torch.arange(n) <= anchors.unsqueeze(-1)
        return self._contemplate_rows(
            con_x, soft, lambda layer: (pass_out.ks[layer], pass_out.vs[layer]), ctx_mask
        )

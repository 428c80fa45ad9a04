"""The future signal: soft prompts, MoE embedders and future-prediction routing."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ContractError, DimensionError
from .nn import DTYPE, ParamStore, TensorF64, normal, seeded_generator


class SoftPromptSet:
    """``s`` learnable key/value rows per target layer.

    Stored as one tensor of shape (s, n_layers, 2, d_model) under
    ``<prefix>.kv``; index 0 of the third axis is the key, 1 the value.
    """

    def __init__(
        self,
        s: int,
        n_layers: int,
        d_model: int,
        seed: int = 0,
        std: float = 0.1,
        prefix: str = "soft_prompt",
    ) -> None:
        if s < 0:
            raise ConfigError(f"soft prompt count must be >= 0, got {s}")
        self.s = s
        self.n_layers = n_layers
        self.d_model = d_model
        self.prefix = prefix
        self.store = ParamStore()
        g = seeded_generator(seed)
        self.store.add(f"{prefix}.kv", normal((s, n_layers, 2, d_model), std, g))

    @property
    def kv(self) -> TensorF64:
        return self.store[f"{self.prefix}.kv"]

    def keys(self, layer: int) -> TensorF64:
        return self.kv[:, layer, 0, :]

    def values(self, layer: int) -> TensorF64:
        return self.kv[:, layer, 1, :]


@dataclass
class GateReport:
    """Routing outcome for one (or a batch of) MoE call(s)."""

    probs: TensorF64  # full softmax over experts (..., n_expert)
    selected: torch.Tensor  # expert indices, best first (..., k)
    weights: TensorF64  # renormalized weights of the selected experts (..., k)
    gates: TensorF64  # dense gate vector, zero outside the selection (..., n_expert)


class MoEEmbedder:
    """Router plus a bank of expert embeddings, combined by top-k gating."""

    def __init__(
        self,
        prefix: str,
        in_dim: int,
        d_model: int,
        n_expert: int = 8,
        k_expert: int = 2,
        seed: int = 0,
        center: TensorF64 | None = None,
        expert_std: float = 0.02,
        router_std: float = 0.0,
        bias: bool = False,
    ) -> None:
        if n_expert < 1:
            raise ConfigError(f"n_expert must be >= 1, got {n_expert}")
        if not 1 <= k_expert <= n_expert:
            raise ConfigError(f"need 1 <= k_expert <= n_expert, got {k_expert} > {n_expert}")
        self.prefix = prefix
        self.in_dim = in_dim
        self.d_model = d_model
        self.n_expert = n_expert
        self.k_expert = k_expert
        self.bias = bias
        g = seeded_generator(seed)
        mean = torch.zeros(d_model, dtype=DTYPE) if center is None else center.detach()
        self.store = ParamStore()
        self.store.add(f"{prefix}.router", normal((n_expert, in_dim), router_std, g))
        if bias:
            self.store.add(f"{prefix}.router_bias", torch.zeros(n_expert, dtype=DTYPE))
        self.store.add(f"{prefix}.experts", normal((n_expert, d_model), expert_std, g) + mean)

    @property
    def router(self) -> TensorF64:
        return self.store[f"{self.prefix}.router"]

    @property
    def experts(self) -> TensorF64:
        return self.store[f"{self.prefix}.experts"]

    def logits(self, h: TensorF64) -> TensorF64:
        out = h @ self.router.T
        if self.bias:
            out = out + self.store[f"{self.prefix}.router_bias"]
        return out

    def __call__(self, h: TensorF64) -> TensorF64:
        return moe_embed(h, self)[0]


def top_k_stable(probs: TensorF64, k: int) -> torch.Tensor:
    """Indices of the k largest entries; equal values resolve to the lower index."""
    order = torch.argsort(-probs.detach(), dim=-1, stable=True)
    return order[..., :k]


def moe_embed(h: TensorF64, embedder: MoEEmbedder) -> tuple[TensorF64, GateReport]:
    if h.shape[-1] != embedder.in_dim:
        raise DimensionError(
            f"{embedder.prefix}: router expects input size {embedder.in_dim}, got {h.shape[-1]}"
        )
    probs = torch.softmax(embedder.logits(h), dim=-1)
    selected = top_k_stable(probs, embedder.k_expert)
    picked = torch.gather(probs, -1, selected)
    weights = picked / picked.sum(dim=-1, keepdim=True)
    gates = torch.zeros_like(probs).scatter(-1, selected, weights)
    out = gates @ embedder.experts
    return out, GateReport(probs=probs, selected=selected, weights=weights, gates=gates)


@dataclass(frozen=True)
class FuturePrediction:
    f: TensorF64
    node: int


def select_future(
    per_node_futures: TensorF64 | Sequence[TensorF64 | None], accepted_path: Sequence[int]
) -> FuturePrediction:
    """Future of the last accepted node.

    ``accepted_path`` lists tree node indices from the root; the root is the
    already-committed token, so the path is never empty.
    """
    if len(accepted_path) == 0:
        raise ContractError("accepted path must contain at least the root node")
    node = int(accepted_path[-1])
    if node >= len(per_node_futures) or per_node_futures[node] is None:
        raise ContractError(f"node {node} has no future prediction")
    return FuturePrediction(f=per_node_futures[node], node=node)


def expert_histogram(selected: Sequence[np.ndarray] | np.ndarray, n_expert: int) -> list[int]:
    counts = np.zeros(n_expert, dtype=np.int64)
    for idx in selected:
        np.add.at(counts, np.asarray(idx).reshape(-1), 1)
    return counts.tolist()


class ContemplateModule:
    """Target-side ConFu parameters: soft prompts plus the [con] MoE embedder."""

    def __init__(
        self,
        n_layers: int,
        d_model: int,
        s: int = 16,
        n_expert: int = 8,
        k_expert: int = 2,
        seed: int = 0,
        center: TensorF64 | None = None,
    ) -> None:
        self.soft = SoftPromptSet(s, n_layers, d_model, seed=seed + 1)
        self.moe = MoEEmbedder(
            "moe_con", 3 * d_model, d_model, n_expert, k_expert, seed=seed + 2, center=center
        )
        self.store = ParamStore.union(self.soft.store, self.moe.store)

    def embed(self, tap_cat: TensorF64) -> tuple[TensorF64, GateReport]:
        return moe_embed(tap_cat, self.moe)

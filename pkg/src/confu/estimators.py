"""scikit-learn style wrappers over the training stages and the decoder.

Hyperparameters live in ``__init__`` (so ``get_params``/``set_params``
and ``clone`` work); fitted state carries a trailing underscore.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .bench import ExperimentSpec, decoder_for
from .checkpoint import Checkpoint
from .draft import DraftConfig
from .errors import DimensionError
from .target import TargetConfig
from .training import (
    FutureConfig,
    JsonlLog,
    TrainConfig,
    models_from_checkpoint,
    train_confu,
    train_draft,
    train_target,
)


def check_token_array(X, vocab_size: int, min_len: int = 2) -> np.ndarray:
    """Validate a (n_sequences, seq_len) integer token matrix."""
    arr = np.asarray(X)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d token array, got shape {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] < min_len:
        raise DimensionError(f"need >= 1 sequence of length >= {min_len}, got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("token ids must be integers")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise ValueError(f"token ids must lie in [0, {vocab_size})")
    return arr


class TargetLM(BaseEstimator):
    def __init__(self, vocab_size=259, d_model=64, n_heads=4, n_layers=4, max_seq_len=128,
                 steps=2000, batch=16, lr=3e-3, seed=0):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.max_seq_len = max_seq_len
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        X = check_token_array(X, self.vocab_size)
        tc = TargetConfig(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.max_seq_len)
        self.log_ = JsonlLog()
        self.checkpoint_ = train_target(X, tc, TrainConfig(steps=self.steps, batch=self.batch, lr=self.lr, seed=self.seed), self.log_)
        self.model_ = models_from_checkpoint(self.checkpoint_).target
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Next-token distribution after each sequence."""
        check_is_fitted(self, "model_")
        X = check_token_array(X, self.vocab_size, min_len=1)
        with torch.no_grad():
            logits = self.model_.forward_full(torch.from_numpy(X)).logits[:, -1]
        return torch.softmax(logits, dim=-1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=-1)

    def transform(self, X) -> np.ndarray:
        """Concatenated tap features, shape (n, seq_len, 3 * d_model)."""
        check_is_fitted(self, "model_")
        X = check_token_array(X, self.vocab_size, min_len=1)
        with torch.no_grad():
            return self.model_.forward_full(torch.from_numpy(X)).taps.numpy()

    def score(self, X, y=None) -> float:
        """Mean next-token log-likelihood (higher is better)."""
        from .training import loss_target

        check_is_fitted(self, "model_")
        X = check_token_array(X, self.vocab_size)
        with torch.no_grad():
            return -float(loss_target(self.model_, X))


class _DraftBase(BaseEstimator):
    def _fitted_models(self):
        check_is_fitted(self, "checkpoint_")
        return models_from_checkpoint(self.checkpoint_)


class EagleDraftHead(_DraftBase):
    def __init__(self, target=None, unroll=3, steps=1000, batch=8, lr=1e-3, nodes=30, branch=4, seed=0):
        self.target = target
        self.unroll = unroll
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.nodes = nodes
        self.branch = branch
        self.seed = seed

    def fit(self, X, y=None):
        init = _checkpoint_of(self.target)
        tc = models_from_checkpoint(init).target.config
        X = check_token_array(X, tc.vocab_size)
        dc = DraftConfig(d_model=tc.d_model, n_heads=tc.n_heads, vocab_size=tc.vocab_size,
                         nodes=self.nodes, branch=self.branch)
        cfg = TrainConfig(unroll=self.unroll, steps=self.steps, batch=self.batch, lr=self.lr, seed=self.seed)
        self.log_ = JsonlLog()
        self.checkpoint_ = train_draft(X, init, dc, cfg, self.log_)
        return self


class ConfuDraftHead(_DraftBase):
    def __init__(self, draft=None, variant="confu", soft_prompts=16, n_expert=8, k_expert=2,
                 unroll=3, anchors=8, window=1, steps=1000, batch=8, lr=1e-3, seed=0):
        self.draft = draft
        self.variant = variant
        self.soft_prompts = soft_prompts
        self.n_expert = n_expert
        self.k_expert = k_expert
        self.unroll = unroll
        self.anchors = anchors
        self.window = window
        self.steps = steps
        self.batch = batch
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        init = _checkpoint_of(self.draft)
        tc = models_from_checkpoint(init).target.config
        X = check_token_array(X, tc.vocab_size)
        fc = FutureConfig.for_variant(self.variant, soft_prompts=self.soft_prompts,
                                      n_expert=self.n_expert, k_expert=self.k_expert)
        cfg = TrainConfig(unroll=self.unroll, anchors=self.anchors, window=self.window,
                          steps=self.steps, batch=self.batch, lr=self.lr, seed=self.seed)
        self.log_ = JsonlLog()
        self.checkpoint_ = train_confu(X, init, fc, cfg, self.log_)
        return self


def _checkpoint_of(obj) -> Checkpoint:
    if isinstance(obj, Checkpoint):
        return obj
    check_is_fitted(obj, "checkpoint_")
    return obj.checkpoint_


class SpeculativeGenerator(BaseEstimator):
    """Decoder over a fitted draft estimator (or checkpoint); ``score`` is the mean accept length."""

    def __init__(self, draft=None, mode=None, temperature=0.0, nodes=30, branch=4, max_depth=0,
                 rule="lossless", max_tokens=48, seed=0):
        self.draft = draft
        self.mode = mode
        self.temperature = temperature
        self.nodes = nodes
        self.branch = branch
        self.max_depth = max_depth
        self.rule = rule
        self.max_tokens = max_tokens
        self.seed = seed

    def fit(self, X=None, y=None):
        models = models_from_checkpoint(_checkpoint_of(self.draft))
        mode = self.mode or ("confu" if models.contemplate is not None else "baseline")
        spec = ExperimentSpec(modes=(mode,), branch=self.branch, max_depth=self.max_depth, rule=self.rule)
        self.decoder_ = decoder_for(models, mode, self.temperature, self.nodes, spec)
        return self

    def predict(self, prompts: Sequence[Sequence[int]]) -> list[list[int]]:
        check_is_fitted(self, "decoder_")
        return [self.decoder_.generate(list(p), self.max_tokens, seed=self.seed + i)[0]
                for i, p in enumerate(prompts)]

    def score(self, prompts, y=None) -> float:
        check_is_fitted(self, "decoder_")
        accepted = rounds = 0
        for i, p in enumerate(prompts):
            _, m = self.decoder_.generate(list(p), self.max_tokens, seed=self.seed + i)
            accepted += sum(m.accepted_per_round)
            rounds += m.rounds
        return accepted / rounds if rounds else 0.0

"""
User state encoder.

A request (static user features plus interaction history) becomes the state
``s = e_u ++ psi_u``: ``e_u`` fuses a feature embedding with a self-attention
summary of the history, ``psi_u`` is a context vector computed from the
features and recent feedback statistics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from retention_lab.exceptions import DimensionError
from retention_lab.nn_core import (
    AttentionCache,
    AttentionSpec,
    MLPCache,
    MLPSpec,
    ParamSet,
    attention_backward,
    attention_forward,
    backprop,
    init_attention,
    init_mlp,
    mlp_forward,
)

logger = logging.getLogger(__name__)

UserFeatures = np.ndarray


@dataclass(frozen=True)
class InteractionHistory:
    """Per-step history entries, oldest first."""

    item_embeddings: np.ndarray
    feedback: np.ndarray

    def __post_init__(self) -> None:
        items = np.asarray(self.item_embeddings, dtype=np.float64)
        feedback = np.asarray(self.feedback, dtype=np.float64)
        if items.ndim != 2 or feedback.ndim != 2 or items.shape[0] != feedback.shape[0]:
            raise DimensionError(
                f"history arrays must be (n, d) with equal n, got {items.shape} and {feedback.shape}"
            )
        object.__setattr__(self, "item_embeddings", items)
        object.__setattr__(self, "feedback", feedback)

    @classmethod
    def empty(cls, d_item: int, n_behaviors: int) -> "InteractionHistory":
        return cls(np.zeros((0, d_item)), np.zeros((0, n_behaviors)))

    def __len__(self) -> int:
        return int(self.item_embeddings.shape[0])

    def recent(self, max_length: int) -> "InteractionHistory":
        if len(self) <= max_length:
            return self
        return InteractionHistory(
            self.item_embeddings[-max_length:], self.feedback[-max_length:]
        )


@dataclass(frozen=True)
class Request:
    features: UserFeatures
    history: InteractionHistory


@dataclass(frozen=True)
class StateEmbedding:
    e_u: np.ndarray
    psi_u: np.ndarray

    @property
    def s(self) -> np.ndarray:
        return np.concatenate([self.e_u, self.psi_u])


@dataclass(frozen=True)
class EncoderSpec:
    d_feat: int = 8
    d_item: int = 8
    n_behaviors: int = 3
    d_model: int = 32
    num_heads: int = 4
    max_history: int = 50
    context_window: int = 10
    ncd: bool = False

    @property
    def attention(self) -> AttentionSpec:
        return AttentionSpec(self.d_model, self.num_heads)

    @property
    def state_dim(self) -> int:
        return 2 * self.d_model

    @property
    def input_projection(self) -> MLPSpec:
        return MLPSpec((self.d_item + self.n_behaviors, self.d_model))

    @property
    def feature_mlp(self) -> MLPSpec:
        return MLPSpec((self.d_feat, self.d_model, self.d_model))

    @property
    def fusion_mlp(self) -> MLPSpec:
        return MLPSpec((2 * self.d_model, self.d_model, self.d_model))

    @property
    def context_mlp(self) -> MLPSpec:
        return MLPSpec((self.d_feat + self.n_behaviors + 1, self.d_model, self.d_model))


def build_encoder(spec: EncoderSpec, rng: np.random.Generator) -> ParamSet:
    params = ParamSet("encoder")
    init_mlp(spec.input_projection, params, rng, prefix="in_")
    params.add("pad", rng.uniform(-0.5, 0.5, size=(1, spec.d_model)))
    init_attention(spec.attention, params, rng, prefix="attn_")
    init_mlp(spec.feature_mlp, params, rng, prefix="feat_")
    init_mlp(spec.fusion_mlp, params, rng, prefix="fuse_")
    init_mlp(spec.context_mlp, params, rng, prefix="ctx_")
    return params


def context_input(spec: EncoderSpec, request: Request) -> np.ndarray:
    """Features ++ mean of the last ``context_window`` feedback vectors ++ their count fraction."""
    recent = request.history.feedback[-spec.context_window:]
    if len(recent):
        mean = recent.mean(axis=0)
    else:
        mean = np.zeros(spec.n_behaviors)
    count = np.array([len(recent) / spec.context_window])
    return np.concatenate([request.features, mean, count])


def _filled(lengths: np.ndarray, L: int) -> np.ndarray:
    """(B, L) mask of the occupied history slots; row-major order matches the stacked entries."""
    return np.arange(L)[None, :] < lengths[:, None]


@dataclass
class EncoderCache:
    spec: EncoderSpec
    params: ParamSet
    lengths: np.ndarray
    in_cache: MLPCache | None
    attn_cache: AttentionCache
    feat_cache: MLPCache
    fuse_cache: MLPCache
    ctx_cache: MLPCache | None


def encode_batch(
    spec: EncoderSpec, params: ParamSet, requests: Sequence[Request]
) -> Tuple[np.ndarray, EncoderCache]:
    """
    Encode a batch of requests into an array of states ``(B, 2 * d_model)``.

    Histories are truncated to the most recent ``max_history`` entries; an
    empty history is replaced by the learned pad token.
    """
    d = spec.d_model
    features = np.stack([np.asarray(r.features, dtype=np.float64) for r in requests])
    if features.shape[1] != spec.d_feat:
        raise DimensionError(f"user features have length {features.shape[1]}, expected {spec.d_feat}")
    histories = [r.history.recent(spec.max_history) for r in requests]
    lengths = np.array([len(h) for h in histories], dtype=np.int64)
    B = len(requests)
    L = max(1, int(lengths.max()) if B else 1)

    X = np.zeros((B, L, d))
    in_cache = None
    if lengths.sum() > 0:
        entries = np.concatenate(
            [np.concatenate([h.item_embeddings, h.feedback], axis=1) for h in histories if len(h)]
        )
        if entries.shape[1] != spec.d_item + spec.n_behaviors:
            raise DimensionError(f"history entries have width {entries.shape[1]}")
        projected, in_cache = mlp_forward(spec.input_projection, params, entries, prefix="in_")
        X[_filled(lengths, L)] = projected
    empty = lengths == 0
    X[empty, 0] = params.value("pad")[0]
    history_enc, attn_cache = attention_forward(
        spec.attention, params, X, np.maximum(lengths, 1), prefix="attn_"
    )

    feat_emb, feat_cache = mlp_forward(spec.feature_mlp, params, features, prefix="feat_")
    e_u, fuse_cache = mlp_forward(
        spec.fusion_mlp, params, np.concatenate([feat_emb, history_enc], axis=1), prefix="fuse_"
    )
    if spec.ncd:
        psi_u, ctx_cache = np.zeros((B, d)), None
    else:
        ctx_in = np.stack([context_input(spec, r) for r in requests])
        psi_u, ctx_cache = mlp_forward(spec.context_mlp, params, ctx_in, prefix="ctx_")

    cache = EncoderCache(spec, params, lengths, in_cache, attn_cache, feat_cache, fuse_cache, ctx_cache)
    return np.concatenate([e_u, psi_u], axis=1), cache


def encode_batch_backward(cache: EncoderCache, dS: np.ndarray) -> None:
    """Accumulate encoder gradients for upstream ``dS`` of shape ``(B, 2 * d_model)``."""
    spec, params = cache.spec, cache.params
    d = spec.d_model
    d_fused = backprop(cache.fuse_cache, dS[:, :d])
    backprop(cache.feat_cache, d_fused[:, :d])
    dX = attention_backward(cache.attn_cache, d_fused[:, d:])

    empty = cache.lengths == 0
    if np.any(empty):
        params.grad("pad")[0] += dX[empty, 0].sum(axis=0)
    if cache.in_cache is not None:
        d_projected = dX[_filled(cache.lengths, dX.shape[1])]
        backprop(cache.in_cache, d_projected)
    if cache.ctx_cache is not None:
        backprop(cache.ctx_cache, dS[:, d:])


def encode_history(
    history: InteractionHistory, params: ParamSet, spec: EncoderSpec
) -> np.ndarray:
    """Self-attention summary of a history (pad-token path when empty)."""
    history = history.recent(spec.max_history)
    if len(history) == 0:
        X = params.value("pad")[None]
        lengths = np.array([1])
    else:
        entries = np.concatenate([history.item_embeddings, history.feedback], axis=1)
        projected, _ = mlp_forward(spec.input_projection, params, entries, prefix="in_")
        X = projected[None]
        lengths = np.array([len(history)])
    out, _ = attention_forward(spec.attention, params, X, lengths, prefix="attn_")
    return out[0]


def encode_state(
    features: UserFeatures,
    history: InteractionHistory,
    params: ParamSet,
    spec: EncoderSpec,
) -> StateEmbedding:
    S, _ = encode_batch(spec, params, [Request(np.asarray(features, dtype=np.float64), history)])
    return StateEmbedding(e_u=S[0, : spec.d_model], psi_u=S[0, spec.d_model:])


"""Temporal decoder: one motion-guided query per frame, refined by
attention across frames and cross-attention against motion+text tokens,
then decoded into per-frame start/end probabilities and a segment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tubeground import nn
from tubeground.encoder import FusedFeatures
from tubeground.spatial_decoder import top_similar_mean

__all__ = [
    "TemporalLayerParams",
    "TemporalDecoderParams",
    "TemporalPrediction",
    "generate_temporal_queries",
    "decode_temporal_layer",
    "decode_temporal",
    "temporal_head",
    "extract_segment",
    "run_temporal_decoder",
]


@dataclass
class TemporalLayerParams:
    across_frames: nn.AttentionBlockParams
    cross: nn.AttentionBlockParams


@dataclass
class TemporalDecoderParams:
    layers: list            # list[TemporalLayerParams]
    head: nn.MlpParams      # D -> D -> 2


@dataclass
class TemporalPrediction:
    probs: np.ndarray   # [N_v, 2]; columns are start/end distributions over frames
    logits: np.ndarray  # pre-softmax head output, same shape
    segment: tuple      # decoded (start, end), start <= end


def generate_temporal_queries(fused: FusedFeatures, pooled_text: np.ndarray, m: int, kind: str = "cosine") -> np.ndarray:
    """Per frame, the mean of the m motion tokens most similar to the text."""
    n_v, _, d = fused.tokens.shape
    queries = np.empty((n_v, d), dtype=np.float64)
    for i in range(n_v):
        queries[i], _ = top_similar_mean(fused.motion[i], pooled_text, m, kind)
    return queries


def decode_temporal_layer(queries: np.ndarray, fused: FusedFeatures, layer: TemporalLayerParams) -> np.ndarray:
    """Self-attention over the N_v queries, then per-frame cross-attention."""
    out = nn.attention_block(queries, queries, layer.across_frames)
    final = np.empty_like(out)
    for i in range(queries.shape[0]):
        memory = np.concatenate([fused.motion[i], fused.text[i]], axis=0)
        final[i] = nn.attention_block(out[i : i + 1], memory, layer.cross)[0]
    return final


def decode_temporal(queries: np.ndarray, fused: FusedFeatures, params: TemporalDecoderParams) -> np.ndarray:
    for layer in params.layers:
        queries = decode_temporal_layer(queries, fused, layer)
    return queries


def temporal_head(queries: np.ndarray, params: TemporalDecoderParams):
    """Two logits per frame, softmaxed across the frame axis per channel."""
    logits = nn.mlp(queries, params.head)
    return nn.softmax(logits, axis=0), logits


def extract_segment(probs: np.ndarray) -> tuple:
    """Most probable (start, end) pair with start <= end.

    Maximizes start_prob[s] * end_prob[e] over all ordered pairs; ties
    resolve to the smallest start, then the smallest end.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 2:
        raise ValueError(f"expected [N_v, 2] probabilities, got {probs.shape}")
    outer = probs[:, 0][:, None] * probs[:, 1][None, :]
    outer[np.tril_indices(probs.shape[0], k=-1)] = -np.inf
    best = np.argwhere(outer == outer.max())[0]  # argwhere is row-major: smallest s, then e
    return int(best[0]), int(best[1])


def run_temporal_decoder(
    fused: FusedFeatures,
    pooled_text: np.ndarray,
    params: TemporalDecoderParams,
    m: int,
    kind: str = "cosine",
) -> TemporalPrediction:
    queries = generate_temporal_queries(fused, pooled_text, m, kind)
    queries = decode_temporal(queries, fused, params)
    probs, logits = temporal_head(queries, params)
    return TemporalPrediction(probs=probs, logits=logits, segment=extract_segment(probs))

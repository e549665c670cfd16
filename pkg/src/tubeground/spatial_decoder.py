"""Spatial multi-object decoder.

Queries are seeded from the appearance tokens most similar to the pooled
text feature (shared content vector per frame, plus a per-index learned
embedding that breaks the symmetry between queries). Each refinement
layer runs attention across queries of the same frame, attention across
frames for the same query index, then cross-attention against that
frame's appearance and text tokens. Heads emit per-frame boxes and class
distributions over text-token slots plus a trailing no-object slot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tubeground import nn
from tubeground.encoder import FusedFeatures

__all__ = [
    "SpatialLayerParams",
    "SpatialDecoderParams",
    "SpatialPredictions",
    "top_similar_mean",
    "generate_spatial_queries",
    "decode_spatial_layer",
    "decode_spatial",
    "spatial_head",
    "class_head",
    "run_spatial_decoder",
]


@dataclass
class SpatialLayerParams:
    within_frame: nn.AttentionBlockParams   # attention over the N_q queries of one frame
    across_frames: nn.AttentionBlockParams  # attention over the N_v slots of one query index
    cross: nn.AttentionBlockParams          # queries against appearance+text tokens


@dataclass
class SpatialDecoderParams:
    query_embed: np.ndarray  # [N_q, D]
    layers: list             # list[SpatialLayerParams]
    box_head: nn.MlpParams   # D -> D -> D -> 4
    cls_head: nn.MlpParams   # D -> D -> D -> n_slots_max + 1
    n_class_slots: int       # width of the class logits minus the no-object slot


@dataclass
class SpatialPredictions:
    boxes: np.ndarray        # [N_v, N_q, 4] (cx, cy, w, h), each in (0, 1)
    class_probs: np.ndarray  # [N_v, N_q, n_active + 1], rows sum to 1
    class_logits: np.ndarray # matching logits (same shape as class_probs)


def similarities(tokens: np.ndarray, reference: np.ndarray, kind: str = "cosine") -> np.ndarray:
    """Similarity of each token (rows) against a reference vector."""
    tokens = np.asarray(tokens, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    dots = tokens @ reference
    if kind == "dot":
        return dots
    if kind != "cosine":
        raise ValueError(f"unknown similarity kind {kind!r}")
    denom = np.linalg.norm(tokens, axis=-1) * np.linalg.norm(reference)
    out = np.zeros_like(dots)
    np.divide(dots, denom, out=out, where=denom > 0)
    return out


def top_similar_mean(tokens: np.ndarray, reference: np.ndarray, m: int, kind: str = "cosine"):
    """Mean of the m tokens most similar to the reference.

    Ties are broken toward the lowest token index. Returns (mean, indices).
    """
    if m < 1 or m > tokens.shape[0]:
        raise ValueError(f"top-M size {m} outside [1, {tokens.shape[0]}]")
    sims = similarities(tokens, reference, kind)
    order = np.argsort(-sims, kind="stable")[:m]
    return tokens[order].mean(axis=0), order


def generate_spatial_queries(
    fused: FusedFeatures,
    pooled_text: np.ndarray,
    m: int,
    params: SpatialDecoderParams,
    kind: str = "cosine",
) -> np.ndarray:
    """Initial queries: per-frame top-M appearance mean + learned embeddings."""
    n_v = fused.tokens.shape[0]
    n_q, d = params.query_embed.shape
    queries = np.empty((n_v, n_q, d), dtype=np.float64)
    for i in range(n_v):
        content, _ = top_similar_mean(fused.appearance[i], pooled_text, m, kind)
        queries[i] = content[None, :] + params.query_embed
    return queries


def decode_spatial_layer(queries: np.ndarray, fused: FusedFeatures, layer: SpatialLayerParams) -> np.ndarray:
    """One refinement layer; shape [N_v, N_q, D] is preserved.

    Every step along the query axis runs in exact mode (position- and
    order-independent reductions), so permuting query indices permutes
    the output bit-exactly; the query-identity contract relies on this.
    The across-frames attention treats each query index separately and
    needs no special handling.
    """
    n_v, n_q, d = queries.shape
    out = np.empty_like(queries)
    for i in range(n_v):
        out[i] = nn.attention_block(queries[i], queries[i], layer.within_frame, exact_sum=True)
    across = np.empty_like(out)
    for j in range(n_q):
        across[:, j] = nn.attention_block(out[:, j], out[:, j], layer.across_frames)
    final = np.empty_like(across)
    for i in range(n_v):
        memory = np.concatenate([fused.appearance[i], fused.text[i]], axis=0)
        final[i] = nn.attention_block(across[i], memory, layer.cross, exact_sum=True)
    return final


def decode_spatial(queries: np.ndarray, fused: FusedFeatures, params: SpatialDecoderParams) -> np.ndarray:
    for layer in params.layers:
        queries = decode_spatial_layer(queries, fused, layer)
    return queries


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def spatial_head(queries: np.ndarray, params: SpatialDecoderParams) -> np.ndarray:
    """Box head: MLP then a logistic squash onto (0, 1) per coordinate."""
    return _sigmoid(nn.mlp(queries, params.box_head, exact=True))


def class_head(queries: np.ndarray, params: SpatialDecoderParams, n_active: int):
    """Class head over ``n_active`` slots plus the trailing no-object slot.

    The head is parameterized at its maximum width; for shorter texts only
    the first ``n_active`` slots and the final no-object logit take part in
    the softmax, so rows always sum to 1 over n_active + 1 entries.
    """
    if not 1 <= n_active <= params.n_class_slots:
        raise ValueError(f"active slot count {n_active} outside [1, {params.n_class_slots}]")
    full = nn.mlp(queries, params.cls_head, exact=True)
    logits = np.concatenate([full[..., :n_active], full[..., -1:]], axis=-1)
    return nn.softmax(logits, axis=-1), logits


def run_spatial_decoder(
    fused: FusedFeatures,
    pooled_text: np.ndarray,
    params: SpatialDecoderParams,
    m: int,
    n_active: int,
    kind: str = "cosine",
) -> SpatialPredictions:
    queries = generate_spatial_queries(fused, pooled_text, m, params, kind)
    queries = decode_spatial(queries, fused, params)
    boxes = spatial_head(queries, params)
    probs, logits = class_head(queries, params, n_active)
    return SpatialPredictions(boxes=boxes, class_probs=probs, class_logits=logits)

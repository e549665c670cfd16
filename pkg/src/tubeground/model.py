"""Parameter construction, checkpoint mapping, and the full forward pass
from a feature bundle to per-frame boxes, class distributions, and
temporal probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tubeground import encoder as enc
from tubeground import nn
from tubeground import spatial_decoder as sd
from tubeground import temporal_decoder as td
from tubeground.config import RunConfig

__all__ = [
    "ModelParams",
    "build_params",
    "transparent_params",
    "params_to_arrays",
    "params_from_arrays",
    "ForwardResult",
    "forward_video",
]


@dataclass
class ModelParams:
    encoder: enc.EncoderParams
    spatial: sd.SpatialDecoderParams
    temporal: td.TemporalDecoderParams


def build_params(cfg: RunConfig, seed: int | None = None) -> ModelParams:
    """Deterministically initialize all parameters from one seed.

    The draw order is fixed by the construction sequence below, so a given
    (config, seed) pair always yields bit-identical parameters.
    """
    cfg.validate()
    init = nn.ParamInit(cfg.seed if seed is None else seed)
    d = cfg.d_model
    grid_slots = 2 * cfg.grid_h * cfg.grid_w
    hidden = d * cfg.ffn_mult

    encoder_params = enc.EncoderParams(
        proj_a_w=init.matrix(cfg.d_appearance, d), proj_a_b=init.zeros(d),
        proj_m_w=init.matrix(cfg.d_motion, d), proj_m_b=init.zeros(d),
        proj_t_w=init.matrix(cfg.d_text, d), proj_t_b=init.zeros(d),
        pos_table=init.table((cfg.n_frames_max, grid_slots + cfg.n_text_max, d), fan_in=d),
        type_table=init.table((3, d), fan_in=d),
        blocks=[init.attention_block(d, cfg.heads, hidden) for _ in range(cfg.encoder_blocks)],
        grid_slots=grid_slots,
    )
    spatial_params = sd.SpatialDecoderParams(
        query_embed=init.table((cfg.n_queries, d), fan_in=d),
        layers=[
            sd.SpatialLayerParams(
                within_frame=init.attention_block(d, cfg.heads, hidden),
                across_frames=init.attention_block(d, cfg.heads, hidden),
                cross=init.attention_block(d, cfg.heads, hidden),
            )
            for _ in range(cfg.decoder_layers)
        ],
        box_head=init.mlp([d, d, d, 4]),
        cls_head=init.mlp([d, d, d, cfg.n_class_slots + 1]),
        n_class_slots=cfg.n_class_slots,
    )
    temporal_params = td.TemporalDecoderParams(
        layers=[
            td.TemporalLayerParams(
                across_frames=init.attention_block(d, cfg.heads, hidden),
                cross=init.attention_block(d, cfg.heads, hidden),
            )
            for _ in range(cfg.decoder_layers)
        ],
        head=init.mlp([d, d, 2]),
    )
    return ModelParams(encoder=encoder_params, spatial=spatial_params, temporal=temporal_params)


def transparent_params(cfg: RunConfig, seed: int | None = None) -> ModelParams:
    """Identity fusion: identity projections, zero embeddings, no encoder
    blocks, so fused features equal the raw ones. Requires all modality
    widths to equal d_model. Useful for pipeline debugging and for
    verifying query generation against raw-feature constructions."""
    if not cfg.d_appearance == cfg.d_motion == cfg.d_text == cfg.d_model:
        raise ValueError("transparent fusion needs equal modality widths")
    params = build_params(cfg.replace(encoder_blocks=0), seed)
    d = cfg.d_model
    eye = np.eye(d)
    e = params.encoder
    e.proj_a_w = eye.copy()
    e.proj_m_w = eye.copy()
    e.proj_t_w = eye.copy()
    e.proj_a_b = np.zeros(d)
    e.proj_m_b = np.zeros(d)
    e.proj_t_b = np.zeros(d)
    e.pos_table = np.zeros_like(e.pos_table)
    e.type_table = np.zeros_like(e.type_table)
    return params


def _flatten_block(prefix: str, block: nn.AttentionBlockParams, out: dict) -> None:
    a = block.attn
    for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
        out[f"{prefix}.attn.{name}"] = getattr(a, name)
    for name in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
        out[f"{prefix}.{name}"] = getattr(block, name)


def _flatten_mlp(prefix: str, m: nn.MlpParams, out: dict) -> None:
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b


def params_to_arrays(params: ModelParams) -> dict:
    """Flatten parameters to named arrays for the checkpoint format."""
    out: dict = {}
    e = params.encoder
    out["encoder.proj_a_w"] = e.proj_a_w
    out["encoder.proj_a_b"] = e.proj_a_b
    out["encoder.proj_m_w"] = e.proj_m_w
    out["encoder.proj_m_b"] = e.proj_m_b
    out["encoder.proj_t_w"] = e.proj_t_w
    out["encoder.proj_t_b"] = e.proj_t_b
    out["encoder.pos_table"] = e.pos_table
    out["encoder.type_table"] = e.type_table
    for i, block in enumerate(e.blocks):
        _flatten_block(f"encoder.block{i}", block, out)
    s = params.spatial
    out["spatial.query_embed"] = s.query_embed
    for i, layer in enumerate(s.layers):
        _flatten_block(f"spatial.layer{i}.within_frame", layer.within_frame, out)
        _flatten_block(f"spatial.layer{i}.across_frames", layer.across_frames, out)
        _flatten_block(f"spatial.layer{i}.cross", layer.cross, out)
    _flatten_mlp("spatial.box_head", s.box_head, out)
    _flatten_mlp("spatial.cls_head", s.cls_head, out)
    t = params.temporal
    for i, layer in enumerate(t.layers):
        _flatten_block(f"temporal.layer{i}.across_frames", layer.across_frames, out)
        _flatten_block(f"temporal.layer{i}.cross", layer.cross, out)
    _flatten_mlp("temporal.head", t.head, out)
    return {name: arr.astype(np.float32) for name, arr in out.items()}


def params_from_arrays(arrays: dict, cfg: RunConfig) -> ModelParams:
    """Rebuild structured parameters from checkpoint arrays.

    Shapes are re-derived from the config; a mismatch between the two
    raises rather than silently truncating.
    """
    params = build_params(cfg)  # template for structure; values overwritten
    flat = params_to_arrays(params)
    missing = set(flat) - set(arrays)
    extra = set(arrays) - set(flat)
    if missing or extra:
        raise ValueError(f"checkpoint does not match config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")

    def fetch(name: str, like: np.ndarray) -> np.ndarray:
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != like.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != expected {like.shape}")
        return arr

    def load_block(prefix: str, block: nn.AttentionBlockParams) -> None:
        a = block.attn
        for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            setattr(a, name, fetch(f"{prefix}.attn.{name}", getattr(a, name)))
        for name in ("ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            setattr(block, name, fetch(f"{prefix}.{name}", getattr(block, name)))

    def load_mlp(prefix: str, m: nn.MlpParams) -> None:
        m.weights = [fetch(f"{prefix}.w{i}", w) for i, w in enumerate(m.weights)]
        m.biases = [fetch(f"{prefix}.b{i}", b) for i, b in enumerate(m.biases)]

    e = params.encoder
    for name in ("proj_a_w", "proj_a_b", "proj_m_w", "proj_m_b", "proj_t_w", "proj_t_b", "pos_table", "type_table"):
        setattr(e, name, fetch(f"encoder.{name}", getattr(e, name)))
    for i, block in enumerate(e.blocks):
        load_block(f"encoder.block{i}", block)
    s = params.spatial
    s.query_embed = fetch("spatial.query_embed", s.query_embed)
    for i, layer in enumerate(s.layers):
        load_block(f"spatial.layer{i}.within_frame", layer.within_frame)
        load_block(f"spatial.layer{i}.across_frames", layer.across_frames)
        load_block(f"spatial.layer{i}.cross", layer.cross)
    load_mlp("spatial.box_head", s.box_head)
    load_mlp("spatial.cls_head", s.cls_head)
    t = params.temporal
    for i, layer in enumerate(t.layers):
        load_block(f"temporal.layer{i}.across_frames", layer.across_frames)
        load_block(f"temporal.layer{i}.cross", layer.cross)
    load_mlp("temporal.head", t.head)
    return params


@dataclass
class ForwardResult:
    boxes: np.ndarray           # [N_v, N_q, 4]
    class_probs: np.ndarray     # [N_v, N_q, n_active + 1]
    class_logits: np.ndarray
    temporal_probs: np.ndarray  # [N_v, 2]
    temporal_logits: np.ndarray
    segment: tuple


def forward_video(params: ModelParams, bundle: enc.FeatureBundle, cfg: RunConfig) -> ForwardResult:
    """Encode, decode, and apply the heads for one video."""
    fused = enc.encode_bundle(bundle, params.encoder, cfg.n_text_max)
    pooled = enc.pool_text(fused)
    n_active = len(cfg.class_vocab) if cfg.class_head_mode == "class" else bundle.n_text
    spatial = sd.run_spatial_decoder(fused, pooled, params.spatial, cfg.top_m, n_active, cfg.similarity)
    temporal = td.run_temporal_decoder(fused, pooled, params.temporal, cfg.top_m, cfg.similarity)
    return ForwardResult(
        boxes=spatial.boxes,
        class_probs=spatial.class_probs,
        class_logits=spatial.class_logits,
        temporal_probs=temporal.probs,
        temporal_logits=temporal.logits,
        segment=temporal.segment,
    )

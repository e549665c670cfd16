"""Multimodal fusion encoder.

Per frame, the projected appearance grid tokens, motion grid tokens, and
(replicated) text tokens are concatenated, given position and type
embeddings, and run through a stack of self-attention blocks spanning the
whole video so the fused stream carries cross-frame information. The
fused sequence is then split back into per-modality views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tubeground import nn

__all__ = [
    "FeatureBundle",
    "EncoderParams",
    "FusedFeatures",
    "assemble_tokens",
    "encode",
    "encode_bundle",
    "pool_text",
]

# type-embedding rows
TYPE_APPEARANCE, TYPE_MOTION, TYPE_TEXT = 0, 1, 2


@dataclass
class FeatureBundle:
    """Raw per-video features: appearance/motion grids plus text tokens."""

    appearance: np.ndarray  # [N_v, H, W, D_a]
    motion: np.ndarray      # [N_v, H, W, D_m]
    text: np.ndarray        # [N_t, D_t]

    def __post_init__(self):
        self.appearance = np.asarray(self.appearance, dtype=np.float64)
        self.motion = np.asarray(self.motion, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)

    @property
    def n_frames(self) -> int:
        return self.appearance.shape[0]

    @property
    def grid_hw(self) -> tuple:
        return self.appearance.shape[1], self.appearance.shape[2]

    @property
    def n_text(self) -> int:
        return self.text.shape[0]

    def validate(self, n_text_max: int | None = None) -> None:
        if self.appearance.ndim != 4 or self.motion.ndim != 4 or self.text.ndim != 2:
            raise ValueError("appearance/motion must be rank-4 and text rank-2")
        if self.motion.shape[:3] != self.appearance.shape[:3]:
            raise ValueError("appearance and motion grids disagree on (N_v, H, W)")
        if self.n_frames < 1 or min(self.grid_hw) < 1:
            raise ValueError("need at least one frame and a non-empty grid")
        if self.n_text < 1:
            raise ValueError("need at least one text token")
        if n_text_max is not None and self.n_text > n_text_max:
            raise ValueError(f"text length {self.n_text} exceeds configured maximum {n_text_max}")
        for name in ("appearance", "motion", "text"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} features contain non-finite values")


@dataclass
class EncoderParams:
    """Per-modality input projections, embedding tables, and fusion blocks."""

    proj_a_w: np.ndarray
    proj_a_b: np.ndarray
    proj_m_w: np.ndarray
    proj_m_b: np.ndarray
    proj_t_w: np.ndarray
    proj_t_b: np.ndarray
    pos_table: np.ndarray    # [n_frames_max, grid_slots + n_text_max, D]
    type_table: np.ndarray   # [3, D]
    blocks: list             # list[nn.AttentionBlockParams]
    grid_slots: int          # 2*H*W of the grid the position table was built for

    @property
    def width(self) -> int:
        return self.proj_a_w.shape[1]


@dataclass
class FusedFeatures:
    """Fused token sequence along with its per-modality views.

    The views are numpy slices of ``tokens``, so concatenating them per
    frame reproduces the fused sequence bit-for-bit.
    """

    tokens: np.ndarray  # [N_v, 2*H*W + N_t, D]
    n_grid: int
    n_text: int

    @property
    def appearance(self) -> np.ndarray:
        return self.tokens[:, : self.n_grid, :]

    @property
    def motion(self) -> np.ndarray:
        return self.tokens[:, self.n_grid : 2 * self.n_grid, :]

    @property
    def text(self) -> np.ndarray:
        return self.tokens[:, 2 * self.n_grid :, :]


def assemble_tokens(bundle: FeatureBundle, params: EncoderParams, n_text_max: int | None = None) -> np.ndarray:
    """Project, embed, and lay out the per-frame token sequence.

    Token order within frame i is [H*W appearance, H*W motion, N_t text];
    text tokens repeat identically across frames before the embeddings
    are added. Returns [N_v, 2*H*W + N_t, D].
    """
    bundle.validate(n_text_max)
    n_v = bundle.n_frames
    h, w = bundle.grid_hw
    n_grid = h * w
    n_t = bundle.n_text
    d = params.width

    app = nn.affine(bundle.appearance.reshape(n_v, n_grid, -1), params.proj_a_w, params.proj_a_b)
    mot = nn.affine(bundle.motion.reshape(n_v, n_grid, -1), params.proj_m_w, params.proj_m_b)
    txt = nn.affine(bundle.text, params.proj_t_w, params.proj_t_b)
    if app.shape[-1] != d or mot.shape[-1] != d or txt.shape[-1] != d:
        raise ValueError("modality projections must share one output width")

    if n_v > params.pos_table.shape[0]:
        raise ValueError(f"video has {n_v} frames but the position table holds {params.pos_table.shape[0]}")
    if 2 * n_grid != params.grid_slots:
        raise ValueError("feature grid does not match the grid the parameters were built for")
    if params.grid_slots + n_t > params.pos_table.shape[1]:
        raise ValueError("frame token count exceeds the position table layout")

    tokens = np.empty((n_v, 2 * n_grid + n_t, d), dtype=np.float64)
    tokens[:, :n_grid] = app + params.type_table[TYPE_APPEARANCE]
    tokens[:, n_grid : 2 * n_grid] = mot + params.type_table[TYPE_MOTION]
    tokens[:, 2 * n_grid :] = txt[None, :, :] + params.type_table[TYPE_TEXT]

    pos = np.concatenate(
        [
            params.pos_table[:n_v, : 2 * n_grid],
            params.pos_table[:n_v, 2 * n_grid : 2 * n_grid + n_t],
        ],
        axis=1,
    )
    return tokens + pos


def encode(tokens: np.ndarray, params: EncoderParams, n_grid: int, n_text: int) -> FusedFeatures:
    """Run the fusion blocks over the full video sequence and split views."""
    n_v, per_frame, d = tokens.shape
    if per_frame != 2 * n_grid + n_text:
        raise ValueError("token layout does not match the declared grid/text sizes")
    seq = tokens.reshape(n_v * per_frame, d)
    for block in params.blocks:
        seq = nn.attention_block(seq, seq, block)
    return FusedFeatures(tokens=seq.reshape(n_v, per_frame, d), n_grid=n_grid, n_text=n_text)


def encode_bundle(bundle: FeatureBundle, params: EncoderParams, n_text_max: int | None = None) -> FusedFeatures:
    """assemble_tokens followed by encode."""
    tokens = assemble_tokens(bundle, params, n_text_max)
    h, w = bundle.grid_hw
    return encode(tokens, params, h * w, bundle.n_text)


def pool_text(fused: FusedFeatures) -> np.ndarray:
    """Average text feature: mean over token slots, then over the frames'
    per-frame copies (identical when the copies agree)."""
    return fused.text.mean(axis=1).mean(axis=0)

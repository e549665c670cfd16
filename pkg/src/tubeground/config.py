"""Run configuration: model dimensions, loss weights, and mode switches.

A config can be loaded from JSON and overridden field-by-field from CLI
flags (flags win). All randomness derives from the single ``seed``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

__all__ = ["RunConfig", "load_config"]


@dataclass
class RunConfig:
    # dimensions
    d_model: int = 32
    grid_h: int = 4
    grid_w: int = 4
    n_text_max: int = 30
    n_queries: int = 12
    n_frames_max: int = 64
    top_m: int = 5
    encoder_blocks: int = 6
    decoder_layers: int = 6
    heads: int = 8
    ffn_mult: int = 4
    # input feature widths (equal to d_model for the synthetic pipeline)
    d_appearance: int = 32
    d_motion: int = 32
    d_text: int = 32
    # loss weights
    spatial_loss_weight: float = 2.0
    temporal_loss_weight: float = 1.0
    iou_cost_weight: float = 3.0
    l1_cost_weight: float = 5.0
    class_cost_weight: float = 1.0
    noobj_weight: float = 0.1
    # mode switches
    class_head_mode: str = "position"   # or "class"
    class_vocab: tuple = ()
    box_loss: str = "giou"              # or "iou"
    similarity: str = "cosine"          # or "dot"
    match_per_frame: bool = False
    kl_smoothing_sigma: float = 0.0
    # reproducibility
    seed: int = 0

    def validate(self) -> None:
        positive = (
            "d_model", "grid_h", "grid_w", "n_text_max", "n_queries",
            "n_frames_max", "top_m", "heads", "ffn_mult",
            "d_appearance", "d_motion", "d_text",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.encoder_blocks < 0 or self.decoder_layers < 0:
            raise ValueError("block/layer counts cannot be negative")
        if self.top_m > self.grid_h * self.grid_w:
            raise ValueError(f"top_m {self.top_m} exceeds grid size {self.grid_h * self.grid_w}")
        if self.d_model % self.heads:
            raise ValueError(f"heads {self.heads} must divide d_model {self.d_model}")
        if self.class_head_mode not in ("position", "class"):
            raise ValueError(f"unknown class head mode {self.class_head_mode!r}")
        if self.class_head_mode == "class" and not self.class_vocab:
            raise ValueError("class head mode 'class' needs a class_vocab")
        if self.box_loss not in ("giou", "iou"):
            raise ValueError(f"unknown box loss {self.box_loss!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ValueError(f"unknown similarity {self.similarity!r}")

    @property
    def n_class_slots(self) -> int:
        """Class-head width minus the no-object slot."""
        if self.class_head_mode == "class":
            return len(self.class_vocab)
        return self.n_text_max

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_vocab"] = list(self.class_vocab)
        return d

    @classmethod
    def from_dict(cls, data: dict, strict: bool = True) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown and strict:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        kwargs = {k: v for k, v in data.items() if k in known}
        if "class_vocab" in kwargs:
            kwargs["class_vocab"] = tuple(kwargs["class_vocab"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def replace(self, **overrides) -> "RunConfig":
        cfg = dataclasses.replace(self, **overrides)
        cfg.validate()
        return cfg

    def digest(self) -> str:
        """Stable hash of the configuration, recorded in output headers."""
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))

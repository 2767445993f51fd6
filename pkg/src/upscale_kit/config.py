"""Architectural configuration of the reference decoder-only transformer."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ValidationError


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int
    intermediate_dim: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    n_experts: int = 1
    top_k: int = 1
    rope_theta: float = 10_000.0
    sliding_window: int | None = None
    ctx_len: int = 4096
    tie_embeddings: bool = False
    norm_eps: float = 1e-5

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.n_kv_heads * self.head_dim

    def validate(self) -> "ModelConfig":
        def positive(name):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")

        for name in ("vocab_size", "embed_dim", "intermediate_dim", "n_layers",
                     "n_heads", "n_kv_heads", "n_experts", "top_k", "ctx_len"):
            positive(name)
        if self.n_heads % self.n_kv_heads != 0:
            raise ValidationError(
                f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})")
        if self.embed_dim % self.n_heads != 0:
            raise ValidationError(
                f"embed_dim ({self.embed_dim}) must be divisible by n_heads ({self.n_heads})")
        if self.top_k > self.n_experts:
            raise ValidationError(
                f"top_k ({self.top_k}) must not exceed n_experts ({self.n_experts})")
        if not self.rope_theta > 0:
            raise ValidationError(f"rope_theta must be positive, got {self.rope_theta}")
        if self.sliding_window is not None and self.sliding_window < 1:
            raise ValidationError(
                f"sliding_window must be >= 1 or absent, got {self.sliding_window}")
        if not self.norm_eps > 0:
            raise ValidationError(f"norm_eps must be positive, got {self.norm_eps}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict, source: str = "config") -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"{source}: unknown field(s) {sorted(unknown)}")
        missing = {f.name for f in dataclasses.fields(cls)
                   if f.default is dataclasses.MISSING} - set(doc)
        if missing:
            raise ValidationError(f"{source}: missing field(s) {sorted(missing)}")
        return cls(**doc)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

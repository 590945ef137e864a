"""Multi-stage CLS fusion transformer and the binary classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gff import numerics as nx
from gff.backbone import INIT_STD, ParameterRegistry, StageTokens, add_block_params, trunc_normal, vit_block
from gff.errors import ContractError, DimensionError
from gff.numerics import Tensor


@dataclass(frozen=True)
class FuseFormerConfig:
    embed_dim: int
    num_stages: int
    depth: int = 2
    num_heads: int = 4
    use_positional: bool = False
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 1 or self.num_stages < 1:
            raise ContractError("depth and num_stages must be positive")
        if self.embed_dim % self.num_heads:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def seq_len(self) -> int:
        return self.num_stages + 1


def init_fuseformer(registry: ParameterRegistry, cfg: FuseFormerConfig, rng: np.random.Generator,
                    prefix: str = "fuse", dtype=np.float32) -> None:
    d = cfg.embed_dim
    registry.add(f"{prefix}.cls", trunc_normal(rng, d, INIT_STD), False, dtype)
    if cfg.use_positional:
        registry.add(f"{prefix}.pos", trunc_normal(rng, (cfg.seq_len, d), INIT_STD), False, dtype)
    mlp_dim = int(round(d * cfg.mlp_ratio))
    for j in range(cfg.depth):
        add_block_params(registry, f"{prefix}.block{j}", d, mlp_dim, rng, False, INIT_STD, dtype)


def init_head(registry: ParameterRegistry, prefix: str, dim: int, dtype=np.float32) -> None:
    """Zero-initialised linear head: every score starts at exactly 0.5."""
    registry.add(f"{prefix}.w", np.zeros((dim, 1)), False, dtype)
    registry.add(f"{prefix}.b", np.zeros(1), False, dtype)


def assemble_sequence(stages: StageTokens | list[Tensor], fuse_cls: Tensor) -> Tensor:
    """[fuse_cls; CLS_1; ...; CLS_L] along the token axis, no re-embedding.

    Stage tokens may be [D] (single image) or [B, D] (batch).
    """
    cls = stages.cls if isinstance(stages, StageTokens) else list(stages)
    d = fuse_cls.shape[-1]
    for i, c in enumerate(cls):
        if c.shape[-1] != d:
            raise DimensionError(f"stage token {i} has dim {c.shape[-1]}, fuse CLS has {d}")
    body = nx.stack(cls, axis=-2)
    if body.ndim == 2:
        return nx.concat([fuse_cls.reshape((1, d)), body], axis=0)
    b = body.shape[0]
    head = nx.add(Tensor._wrap(np.zeros((b, 1, d), dtype=body.dtype)), fuse_cls.reshape((1, 1, d)))
    return nx.concat([head, body], axis=1)


def fuseformer_forward(c0: Tensor, registry: ParameterRegistry, cfg: FuseFormerConfig, prefix: str = "fuse") -> Tensor:
    """Apply ``depth`` pre-norm blocks and return the position-0 token."""
    if c0.ndim not in (2, 3) or c0.shape[-2] != cfg.seq_len or c0.shape[-1] != cfg.embed_dim:
        raise DimensionError(f"fuseformer expects [..., {cfg.seq_len}, {cfg.embed_dim}], got {c0.shape}")
    c = c0
    if cfg.use_positional:
        c = nx.add(c, registry[f"{prefix}.pos"])
    for j in range(cfg.depth):
        c = vit_block(c, registry.view(f"{prefix}.block{j}"), cfg.num_heads)
    return c[..., 0, :]


def head_logit(features: Tensor, registry: ParameterRegistry, prefix: str = "head") -> Tensor:
    """w . features + b; [D] -> scalar, [B, D] -> [B]."""
    w, b = registry[f"{prefix}.w"], registry[f"{prefix}.b"]
    if features.shape[-1] != w.shape[0]:
        raise DimensionError(f"head expects dim {w.shape[0]}, got {features.shape}")
    if features.ndim == 1:
        return nx.add(nx.linear(features, w), b).reshape(())
    return nx.add(nx.matmul(features, w), b).reshape((features.shape[0],))


def classify(features: Tensor, registry: ParameterRegistry, prefix: str = "head") -> Tensor:
    """sigmoid(w . features + b), in (0, 1)."""
    return nx.sigmoid(head_logit(features, registry, prefix))

"""Bottleneck guidance adapter inserted between attention and MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gff import numerics as nx
from gff.backbone import INIT_STD, ParameterRegistry, trunc_normal
from gff.errors import ContractError, DimensionError
from gff.numerics import Tensor


@dataclass
class DFGM:
    """down -> ReLU -> mid -> ReLU -> up, applied token-wise.

    Weights use the ``x @ W`` convention: ``w_down`` is D x d_hat.
    Biases are optional; ``None`` means the bias-free form.
    """

    w_down: Tensor
    w_mid: Tensor
    w_up: Tensor
    b_down: Tensor | None = None
    b_mid: Tensor | None = None
    b_up: Tensor | None = None

    @property
    def dim(self) -> int:
        return self.w_down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]

    def tensors(self) -> list[Tensor]:
        return [t for t in (self.w_down, self.w_mid, self.w_up, self.b_down, self.b_mid, self.b_up) if t is not None]

    @classmethod
    def from_registry(cls, registry: ParameterRegistry, prefix: str) -> "DFGM":
        def opt(name):
            key = f"{prefix}.{name}"
            return registry[key] if key in registry else None

        return cls(
            w_down=registry[f"{prefix}.down.w"],
            w_mid=registry[f"{prefix}.mid.w"],
            w_up=registry[f"{prefix}.up.w"],
            b_down=opt("down.b"),
            b_mid=opt("mid.b"),
            b_up=opt("up.b"),
        )


def check_bottleneck(dim: int, bottleneck: int) -> None:
    if dim < 1 or bottleneck < 1:
        raise ContractError("adapter dims must be positive")
    if 2 * bottleneck > dim:
        raise ContractError(f"bottleneck {bottleneck} must be <= embed_dim/2 ({dim / 2:g})")


def init_dfgm(registry: ParameterRegistry, prefix: str, dim: int, bottleneck: int,
              rng: np.random.Generator, with_biases: bool = True, dtype=np.float32) -> DFGM:
    """Register a trainable adapter. ``up.w`` starts at zero so the block is initially unchanged."""
    check_bottleneck(dim, bottleneck)
    registry.add(f"{prefix}.down.w", trunc_normal(rng, (dim, bottleneck), INIT_STD), False, dtype)
    registry.add(f"{prefix}.mid.w", trunc_normal(rng, (bottleneck, bottleneck), INIT_STD), False, dtype)
    registry.add(f"{prefix}.up.w", np.zeros((bottleneck, dim)), False, dtype)
    if with_biases:
        registry.add(f"{prefix}.down.b", np.zeros(bottleneck), False, dtype)
        registry.add(f"{prefix}.mid.b", np.zeros(bottleneck), False, dtype)
        registry.add(f"{prefix}.up.b", np.zeros(dim), False, dtype)
    return DFGM.from_registry(registry, prefix)


def dfgm_forward(z: Tensor, adapter: DFGM) -> Tensor:
    """Adapter branch only; the caller adds the residual."""
    if z.shape[-1] != adapter.dim:
        raise DimensionError(f"adapter expects last dim {adapter.dim}, got {z.shape}")
    h = nx.relu(nx.linear(z, adapter.w_down, adapter.b_down))
    h = nx.relu(nx.linear(h, adapter.w_mid, adapter.b_mid))
    return nx.linear(h, adapter.w_up, adapter.b_up)


def dfgm_param_count(dim: int, bottleneck: int, with_biases: bool) -> int:
    if dim < 1 or bottleneck < 1:
        raise ContractError("adapter dims must be positive")
    n = dim * bottleneck + bottleneck * bottleneck + bottleneck * dim
    if with_biases:
        n += 2 * bottleneck + dim
    return n

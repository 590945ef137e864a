"""Frozen ViT backbone: patch embedding, pre-norm blocks, adapter slot."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from gff import numerics as nx
from gff.errors import ContractError, DimensionError
from gff.numerics import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "embed_dim", "num_heads", "num_blocks"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.image_size % self.patch_size:
            raise ContractError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ContractError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.mlp_ratio <= 0:
            raise ContractError("mlp_ratio must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class Param:
    tensor: Tensor
    frozen: bool


class ParameterRegistry:
    """Named parameters, each permanently frozen or trainable.

    ``frozen`` is the backbone freeze. Which trainable parameters actually
    receive gradients in a given stage is set with :meth:`set_active`.
    """

    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value, frozen: bool, dtype=np.float32) -> Tensor:
        if name in self._entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=dtype), requires_grad=not frozen)
        self._entries[name] = Param(t, bool(frozen))
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name].tensor
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for k, p in self._entries.items():
            yield k, p.tensor

    def is_frozen(self, name: str) -> bool:
        return self._entries[name].frozen

    def view(self, prefix: str) -> "RegistryView":
        return RegistryView(self, prefix)

    def trainable_names(self) -> list[str]:
        return [k for k, p in self._entries.items() if not p.frozen]

    def set_active(self, predicate: Callable[[str], bool]) -> list[str]:
        """Enable gradients on non-frozen parameters matching ``predicate``."""
        active = []
        for k, p in self._entries.items():
            on = (not p.frozen) and predicate(k)
            p.tensor.requires_grad = on
            p.tensor.grad = None
            if on:
                active.append(k)
        return active

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.tensor.data.copy() for k, p in self._entries.items()}

    def astype(self, dtype) -> "ParameterRegistry":
        out = ParameterRegistry()
        for k, p in self._entries.items():
            out.add(k, p.tensor.data, p.frozen, dtype=dtype)
        return out

    def copy(self) -> "ParameterRegistry":
        out = ParameterRegistry()
        for k, p in self._entries.items():
            out.add(k, p.tensor.data, p.frozen, dtype=p.tensor.dtype)
            out[k].requires_grad = p.tensor.requires_grad
        return out

    def equals(self, other: "ParameterRegistry") -> bool:
        """Bitwise equality of names, flags, shapes, dtypes and values."""
        if self.names() != other.names():
            return False
        for k, p in self._entries.items():
            q = other._entries[k]
            if p.frozen != q.frozen or p.tensor.dtype != q.tensor.dtype or p.tensor.shape != q.tensor.shape:
                return False
            if p.tensor.data.tobytes() != q.tensor.data.tobytes():
                return False
        return True


class RegistryView:
    def __init__(self, registry: ParameterRegistry, prefix: str):
        self.registry = registry
        self.prefix = prefix

    def __getitem__(self, key: str) -> Tensor:
        return self.registry[f"{self.prefix}.{key}"]

    def __contains__(self, key: str) -> bool:
        return f"{self.prefix}.{key}" in self.registry


def count_trainable(registry: ParameterRegistry, predicate: Callable[[str], bool] | None = None) -> int:
    """Element count over non-frozen parameters (optionally filtered by name)."""
    total = 0
    for name, t in registry.items():
        if registry.is_frozen(name) or (predicate is not None and not predicate(name)):
            continue
        total += t.size
    return total


# ---------------------------------------------------------------------------
# initialisation


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def add_block_params(registry: ParameterRegistry, prefix: str, dim: int, mlp_dim: int,
                     rng: np.random.Generator, frozen: bool, std: float | None = INIT_STD, dtype=np.float32) -> None:
    """Register one block's parameters. ``std=None`` scales each matrix by 1/sqrt(fan_in)."""

    def w(name, shape):
        s = 1.0 / np.sqrt(shape[0]) if std is None else std
        registry.add(f"{prefix}.{name}", trunc_normal(rng, shape, s), frozen, dtype)

    def const(name, shape, value):
        registry.add(f"{prefix}.{name}", np.full(shape, value), frozen, dtype)

    const("ln1.g", dim, 1.0)
    const("ln1.b", dim, 0.0)
    w("attn.qkv.w", (dim, 3 * dim))
    const("attn.qkv.b", 3 * dim, 0.0)
    w("attn.proj.w", (dim, dim))
    const("attn.proj.b", dim, 0.0)
    const("ln2.g", dim, 1.0)
    const("ln2.b", dim, 0.0)
    w("mlp.fc1.w", (dim, mlp_dim))
    const("mlp.fc1.b", mlp_dim, 0.0)
    w("mlp.fc2.w", (mlp_dim, dim))
    const("mlp.fc2.b", dim, 0.0)


def init_backbone(registry: ParameterRegistry, cfg: BackboneConfig, rng: np.random.Generator,
                  std: float | None = None, dtype=np.float32) -> None:
    """Seeded random stand-in for pre-trained encoder weights, all frozen.

    With ``std=None`` weight matrices use std 1/sqrt(fan_in) so that signal
    survives the random blocks; CLS and positional embeddings use 0.02.
    """
    d, p = cfg.embed_dim, cfg.patch_size
    proj_std = 1.0 / np.sqrt(p * p * 3) if std is None else std
    registry.add("backbone.embed.proj.w", trunc_normal(rng, (p * p * 3, d), proj_std), True, dtype)
    registry.add("backbone.embed.proj.b", np.zeros(d), True, dtype)
    registry.add("backbone.embed.cls", trunc_normal(rng, d, INIT_STD), True, dtype)
    registry.add("backbone.embed.pos", trunc_normal(rng, (cfg.seq_len, d), INIT_STD), True, dtype)
    for i in range(cfg.num_blocks):
        add_block_params(registry, f"backbone.block{i}", d, cfg.mlp_dim, rng, True, std, dtype)
    registry.add("backbone.final_ln.g", np.ones(d), True, dtype)
    registry.add("backbone.final_ln.b", np.zeros(d), True, dtype)


# ---------------------------------------------------------------------------
# forward pieces


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    return x, False


def patchify(img: Tensor, patch: int) -> Tensor:
    """[B, H, W, 3] -> [B, N, P*P*3], patches in row-major grid order."""
    b, h, w, c = img.shape
    gh, gw = h // patch, w // patch
    x = img.reshape((b, gh, patch, gw, patch, c))
    x = x.transpose((0, 1, 3, 2, 4, 5))
    return x.reshape((b, gh * gw, patch * patch * c))


def patch_embed(img: Tensor, params: RegistryView, cfg: BackboneConfig) -> Tensor:
    """Image(s) -> token sequence with CLS at position 0 plus positional embeddings."""
    img = nx.as_tensor(img)
    single = img.ndim == 3
    if single:
        img = img.reshape((1,) + img.shape)
    if img.ndim != 4 or img.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise DimensionError(f"image shape {img.shape} does not match {cfg.image_size}x{cfg.image_size}x3")
    b = img.shape[0]
    d = cfg.embed_dim
    tokens = nx.linear(patchify(img, cfg.patch_size), params["proj.w"], params["proj.b"])
    zeros = Tensor._wrap(np.zeros((b, 1, d), dtype=tokens.dtype))
    cls = nx.add(zeros, params["cls"].reshape((1, 1, d)))
    seq = nx.add(nx.concat([cls, tokens], axis=1), params["pos"])
    return seq[0] if single else seq


def mhsa(x: Tensor, params: RegistryView, num_heads: int) -> Tensor:
    x, single = _batched(x)
    b, t, d = x.shape
    dh = d // num_heads
    qkv = nx.linear(x, params["attn.qkv.w"], params["attn.qkv.b"])
    qkv = qkv.reshape((b, t, 3, num_heads, dh)).transpose((2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = nx.mul(nx.matmul(q, k.transpose((0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = nx.softmax(scores)
    out = nx.matmul(att, v).transpose((0, 2, 1, 3)).reshape((b, t, d))
    out = nx.linear(out, params["attn.proj.w"], params["attn.proj.b"])
    return out[0] if single else out


def mlp(x: Tensor, params: RegistryView) -> Tensor:
    h = nx.gelu(nx.linear(x, params["mlp.fc1.w"], params["mlp.fc1.b"]))
    return nx.linear(h, params["mlp.fc2.w"], params["mlp.fc2.b"])


def _check_tokens(x: Tensor, dim: int) -> None:
    if x.ndim not in (2, 3) or x.shape[-1] != dim:
        raise DimensionError(f"token tensor {x.shape} incompatible with embed_dim {dim}")


def attention_residual(x: Tensor, params: RegistryView, num_heads: int) -> Tensor:
    return nx.add(mhsa(nx.layernorm(x, params["ln1.g"], params["ln1.b"]), params, num_heads), x)


def mlp_residual(z: Tensor, params: RegistryView) -> Tensor:
    return nx.add(mlp(nx.layernorm(z, params["ln2.g"], params["ln2.b"]), params), z)


def vit_block(x: Tensor, params: RegistryView, num_heads: int) -> Tensor:
    """Pre-norm transformer block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    _check_tokens(x, params["ln1.g"].shape[0])
    return mlp_residual(attention_residual(x, params, num_heads), params)


def gvit_block(x: Tensor, params: RegistryView, num_heads: int, adapter=None) -> Tensor:
    """Block with the adapter residual between attention and MLP.

    ``adapter=None`` is the plain block (the "without adapter" ablation).
    """
    from gff.guidance import dfgm_forward

    _check_tokens(x, params["ln1.g"].shape[0])
    z = attention_residual(x, params, num_heads)
    if adapter is not None:
        z = nx.add(dfgm_forward(z, adapter), z)
    return mlp_residual(z, params)


@dataclass
class StageTokens:
    """Per-block CLS vectors plus final patch tokens.

    ``cls[i]`` is position 0 of block ``i``'s output; the last entry has the
    final layernorm applied. ``last_input`` is the sequence entering the last
    block, kept for gradient heatmaps.
    """

    cls: list[Tensor]
    patches: Tensor
    last_input: Tensor | None = field(default=None, repr=False)

    @property
    def final(self) -> Tensor:
        return self.cls[-1]


def forward_backbone(img: Tensor, registry: ParameterRegistry, cfg: BackboneConfig,
                     adapters: list | None = None, tap: Callable[[Tensor], Tensor] | None = None) -> StageTokens:
    """Run embedding and every block, collecting CLS_i after each block.

    ``adapters`` holds one adapter per block, or ``None`` for a plain backbone.
    ``tap`` may replace the sequence entering the last block (used to take
    gradients with respect to it). Accepts a single [H, W, 3] image or a
    batch [B, H, W, 3].
    """
    from gff.guidance import DFGM

    if adapters is not None and len(adapters) != cfg.num_blocks:
        raise DimensionError(f"{len(adapters)} adapters for {cfg.num_blocks} blocks")
    x = patch_embed(img, registry.view("backbone.embed"), cfg)
    cls_tokens = []
    last_input = x
    for i in range(cfg.num_blocks):
        if i == cfg.num_blocks - 1 and tap is not None:
            x = tap(x)
        last_input = x
        adapter: DFGM | None = None if adapters is None else adapters[i]
        x = gvit_block(x, registry.view(f"backbone.block{i}"), cfg.num_heads, adapter)
        cls_tokens.append(x[..., 0, :])
    cls_tokens[-1] = nx.layernorm(cls_tokens[-1], registry["backbone.final_ln.g"], registry["backbone.final_ln.b"])
    return StageTokens(cls=cls_tokens, patches=x[..., 1:, :], last_input=last_input)

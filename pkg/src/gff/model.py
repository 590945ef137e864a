"""Full detector: frozen backbone + per-block adapters + fusion head.

Parameter namespaces in the registry:

``backbone.*``  frozen encoder (embedding, blocks, final layernorm)
``dfgm.<i>.*``  adapter of block ``i`` (trained in stage 1)
``probe.*``     linear head on the final CLS (stage 1; classifier when fusion is ablated)
``fuse.*``      fusion transformer incl. its CLS token (stage 2)
``head.*``      linear head on the fused token (stage 2)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gff import numerics as nx
from gff.backbone import BackboneConfig, ParameterRegistry, StageTokens, forward_backbone, init_backbone
from gff.errors import ContractError
from gff.fusion import FuseFormerConfig, assemble_sequence, fuseformer_forward, head_logit, init_fuseformer, init_head
from gff.guidance import DFGM, check_bottleneck, init_dfgm
from gff.numerics import Tensor

MODES = ("full", "no-dfgm", "no-fuse", "none")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    bottleneck: int = 16
    adapter_biases: bool = True
    fuse_depth: int = 2
    fuse_heads: int = 4
    fuse_positional: bool = False
    backbone_std: float | None = None  # None: 1/sqrt(fan_in)

    def __post_init__(self):
        check_bottleneck(self.backbone.embed_dim, self.bottleneck)

    @property
    def fuse(self) -> FuseFormerConfig:
        return FuseFormerConfig(
            embed_dim=self.backbone.embed_dim,
            num_stages=self.backbone.num_blocks,
            depth=self.fuse_depth,
            num_heads=self.fuse_heads,
            use_positional=self.fuse_positional,
            mlp_ratio=self.backbone.mlp_ratio,
        )


def init_registry(cfg: ModelConfig, seed: int, dtype=np.float32) -> ParameterRegistry:
    """Seeded parameters. Backbone, adapters and fusion draw from independent
    streams so that changing the adapter or fusion shape keeps the backbone."""
    rb, ra, rf = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    reg = ParameterRegistry()
    init_backbone(reg, cfg.backbone, rb, std=cfg.backbone_std, dtype=dtype)
    d = cfg.backbone.embed_dim
    for i in range(cfg.backbone.num_blocks):
        init_dfgm(reg, f"dfgm.{i}", d, cfg.bottleneck, ra, with_biases=cfg.adapter_biases, dtype=dtype)
    init_head(reg, "probe", d, dtype=dtype)
    init_fuseformer(reg, cfg.fuse, rf, prefix="fuse", dtype=dtype)
    init_head(reg, "head", d, dtype=dtype)
    return reg


class GFFModel:
    """Forward passes for one of the four ablation modes.

    ``full``     adapters on, fusion head
    ``no-dfgm``  adapters bypassed, fusion head
    ``no-fuse``  adapters on, linear probe on the final CLS
    ``none``     adapters bypassed, linear probe on the final CLS
    """

    def __init__(self, cfg: ModelConfig, registry: ParameterRegistry, mode: str = "full"):
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.cfg = cfg
        self.registry = registry
        self.mode = mode
        self.completed_stages: set[int] = set()

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, mode: str = "full", dtype=np.float32) -> "GFFModel":
        return cls(cfg, init_registry(cfg, seed, dtype), mode)

    @property
    def uses_adapters(self) -> bool:
        return self.mode in ("full", "no-fuse")

    @property
    def uses_fusion(self) -> bool:
        return self.mode in ("full", "no-dfgm")

    def adapters(self) -> list[DFGM] | None:
        if not self.uses_adapters:
            return None
        return [DFGM.from_registry(self.registry, f"dfgm.{i}") for i in range(self.cfg.backbone.num_blocks)]

    def _backbone_needs_grad(self) -> bool:
        prefixes = ("backbone.", "dfgm.") if self.uses_adapters else ("backbone.",)
        return any(t.requires_grad for k, t in self.registry.items() if k.startswith(prefixes))

    def stage_tokens(self, images, tap=None) -> StageTokens:
        imgs = images if isinstance(images, Tensor) else Tensor._wrap(np.asarray(images, dtype=self.dtype))
        if self._backbone_needs_grad() or imgs.requires_grad or tap is not None:
            return forward_backbone(imgs, self.registry, self.cfg.backbone, self.adapters(), tap=tap)
        with nx.no_grad():
            return forward_backbone(imgs, self.registry, self.cfg.backbone, self.adapters())

    @property
    def dtype(self):
        return self.registry["backbone.embed.cls"].dtype

    def features_from_tokens(self, stages: StageTokens, fusion: bool | None = None) -> Tensor:
        fusion = self.uses_fusion if fusion is None else fusion
        if not fusion:
            return stages.final
        c0 = assemble_sequence(stages, self.registry["fuse.cls"])
        return fuseformer_forward(c0, self.registry, self.cfg.fuse, prefix="fuse")

    def logits_from_tokens(self, stages: StageTokens, fusion: bool | None = None) -> Tensor:
        """Head logits; ``fusion=False`` forces the probe on the final CLS (stage 1)."""
        fusion = self.uses_fusion if fusion is None else fusion
        return head_logit(self.features_from_tokens(stages, fusion), self.registry, "head" if fusion else "probe")

    def logits(self, images, fusion: bool | None = None) -> Tensor:
        return self.logits_from_tokens(self.stage_tokens(images), fusion)

    def features(self, images) -> np.ndarray:
        with nx.no_grad():
            return self.features_from_tokens(self.stage_tokens(images)).data

    def scores(self, images) -> np.ndarray:
        with nx.no_grad():
            return nx.sigmoid(self.logits(images)).data


def stage_predicate(stage: int, mode: str) -> Callable[[str], bool] | None:
    """Names trained in ``stage`` under ``mode``; ``None`` when the stage is skipped."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if stage == 1:
        if mode in ("no-dfgm", "none"):
            return None
        return lambda name: name.startswith(("dfgm.", "probe."))
    if stage == 2:
        if mode == "no-fuse":
            return None
        if mode == "none":
            return lambda name: name.startswith("probe.")
        return lambda name: name.startswith(("fuse.", "head."))
    raise ContractError(f"stage must be 1 or 2, got {stage}")

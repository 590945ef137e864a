"""Guided-feature-fusion detector for synthetic images.

A frozen ViT backbone is steered by per-block bottleneck adapters (DFGM),
and the per-block CLS tokens are fused by a small transformer (FuseFormer)
before a sigmoid head. Training runs in two stages; see ``gff.trainer``.
"""

__version__ = "0.1.0"

from gff.kernels import BACKEND  # noqa: F401

"""Model geometry and its derived quantities."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the space-time segmentation transformer.

    volume_side: cubic volume edge in voxels
    patch_side: cubic patch edge; must divide volume_side
    gates: temporal frames per input window
    embed_dim: token embedding width; must be divisible by heads
    heads: attention heads per block
    blocks: encoder depth
    """

    volume_side: int = 32
    patch_side: int = 8
    gates: int = 2
    embed_dim: int = 64
    heads: int = 4
    blocks: int = 4

    def __post_init__(self):
        if self.volume_side <= 0 or self.patch_side <= 0:
            raise ValueError("volume_side and patch_side must be positive")
        if self.volume_side % self.patch_side != 0:
            raise ValueError(
                f"volume_side {self.volume_side} not divisible by patch_side {self.patch_side}"
            )
        if self.gates < 1:
            raise ValueError(f"gates must be >= 1, got {self.gates}")
        if self.blocks < 1:
            raise ValueError(f"blocks must be >= 1, got {self.blocks}")
        if self.heads < 1 or self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )

    @property
    def patches_per_side(self) -> int:
        return self.volume_side // self.patch_side

    @property
    def n_patches(self) -> int:
        return self.patches_per_side**3

    @property
    def patch_voxels(self) -> int:
        return self.patch_side**3

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def n_tokens(self) -> int:
        return 1 + self.n_patches * self.gates

    @property
    def mlp_dim(self) -> int:
        return 4 * self.embed_dim

    @property
    def n_voxels(self) -> int:
        return self.volume_side**3

"""The 5-axis gated volume input and its per-gate segmentation masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GatedVolumeSequence:
    """A cubic intensity volume over T gates, with optional binary masks.

    voxels: [V, V, V, 1, T] float64
    endo_mask / epi_mask: [V, V, V, T] uint8, inner and outer wall masks
    """

    voxels: np.ndarray
    endo_mask: np.ndarray | None = None
    epi_mask: np.ndarray | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 5 or self.voxels.shape[3] != 1:
            raise ValueError(
                f"voxels must be [V, V, V, 1, T], got {self.voxels.shape}"
            )
        v = self.voxels.shape[0]
        if self.voxels.shape[1] != v or self.voxels.shape[2] != v:
            raise ValueError(f"volume must be cubic, got {self.voxels.shape}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("voxel intensities must be finite")
        for name in ("endo_mask", "epi_mask"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m, dtype=np.uint8)
            if m.shape != (v, v, v, self.gates):
                raise ValueError(
                    f"{name} must be [V, V, V, T] = {(v, v, v, self.gates)}, got {m.shape}"
                )
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{name} must be binary")
            setattr(self, name, m)
        if self.endo_mask is not None and self.epi_mask is not None:
            if np.any(self.endo_mask > self.epi_mask):
                raise ValueError("endo_mask must be contained in epi_mask voxelwise")

    @property
    def side(self) -> int:
        return self.voxels.shape[0]

    @property
    def gates(self) -> int:
        return self.voxels.shape[4]

    def mask_for(self, structure: str) -> np.ndarray:
        if structure == "endo":
            m = self.endo_mask
        elif structure == "epi":
            m = self.epi_mask
        else:
            raise ValueError(f"structure must be 'endo' or 'epi', got {structure!r}")
        if m is None:
            raise ValueError(f"sequence carries no {structure} mask")
        return m

    def window(self, start: int, gates: int) -> "GatedVolumeSequence":
        """Gates [start, start+gates) with cyclic wrap-around."""
        idx = [(start + i) % self.gates for i in range(gates)]
        return GatedVolumeSequence(
            voxels=self.voxels[..., idx],
            endo_mask=None if self.endo_mask is None else self.endo_mask[..., idx],
            epi_mask=None if self.epi_mask is None else self.epi_mask[..., idx],
        )

    def without_masks(self) -> "GatedVolumeSequence":
        return GatedVolumeSequence(voxels=self.voxels)

"""Synthetic gated left-ventricle phantoms and per-site intensity shifts.

A phantom is an ellipsoidal myocardial shell that contracts and re-expands
over the cardiac cycle. The outer (epicardial) mask is the filled outer
ellipsoid, the inner (endocardial) mask the filled cavity ellipsoid; the
shell between them carries the bright tracer intensity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import uniform_filter

from ..model import GatedVolumeSequence


@dataclass(frozen=True)
class PhantomParams:
    volume_side: int = 32
    center: tuple[float, float, float] = (15.5, 15.5, 15.5)
    epi_radii: tuple[float, float, float] = (11.0, 10.0, 9.0)
    wall_thickness: float = 4.0
    contraction: float = 0.25
    gates: int = 8
    intensity_myo: float = 1.0
    intensity_bg: float = 0.05
    noise_std: float = 0.02

    def __post_init__(self):
        if self.volume_side <= 0 or self.gates < 1:
            raise ValueError("volume_side and gates must be positive")
        if not 0.0 <= self.contraction < 1.0:
            raise ValueError(f"contraction must be in [0, 1), got {self.contraction}")
        min_scale = 1.0 - self.contraction
        inner_at_peak = min(r * min_scale - self.wall_thickness for r in self.epi_radii)
        if inner_at_peak <= 0:
            raise ValueError(
                "inner radii collapse at peak contraction: "
                f"epi_radii {self.epi_radii}, thickness {self.wall_thickness}, "
                f"contraction {self.contraction}"
            )
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class SiteShift:
    """Per-site acquisition shift: affine intensity, blur, extra noise."""

    gain: float = 1.0
    offset: float = 0.0
    blur_radius: int = 0
    noise_std: float = 0.0

    def __post_init__(self):
        if self.gain <= 0:
            raise ValueError(f"gain must be positive, got {self.gain}")
        if self.blur_radius < 0 or self.noise_std < 0:
            raise ValueError("blur_radius and noise_std must be >= 0")


IDENTITY_SHIFT = SiteShift()


def gate_scale(t: int, gates: int, contraction: float) -> float:
    """Radial scale factor at gate t: full size at t=0, peak contraction mid-cycle."""
    return 1.0 - contraction * (1.0 - np.cos(2.0 * np.pi * t / gates)) / 2.0


def _ellipsoid_mask(side: int, center, radii) -> np.ndarray:
    idx = np.arange(side, dtype=np.float64)
    zz = ((idx - center[0]) / radii[0]) ** 2
    yy = ((idx - center[1]) / radii[1]) ** 2
    xx = ((idx - center[2]) / radii[2]) ** 2
    field = zz[:, None, None] + yy[None, :, None] + xx[None, None, :]
    return (field <= 1.0).astype(np.uint8)


def generate_phantom(params: PhantomParams, seed: int = 0) -> GatedVolumeSequence:
    """One subject: a contracting shell over `params.gates` gates, with masks."""
    rng = np.random.default_rng(seed)
    v, t_gates = params.volume_side, params.gates
    voxels = np.empty((v, v, v, 1, t_gates))
    endo = np.empty((v, v, v, t_gates), dtype=np.uint8)
    epi = np.empty((v, v, v, t_gates), dtype=np.uint8)
    for t in range(t_gates):
        s = gate_scale(t, t_gates, params.contraction)
        outer_radii = tuple(r * s for r in params.epi_radii)
        inner_radii = tuple(r - params.wall_thickness for r in outer_radii)
        outer = _ellipsoid_mask(v, params.center, outer_radii)
        inner = _ellipsoid_mask(v, params.center, inner_radii)
        if outer.sum() == 0 or inner.sum() == 0:
            raise ValueError(f"empty mask at gate {t}: radii {outer_radii} / {inner_radii}")
        shell = outer & ~inner
        frame = np.where(shell, params.intensity_myo, params.intensity_bg)
        if params.noise_std > 0:
            frame = frame + rng.normal(0.0, params.noise_std, size=frame.shape)
        voxels[:, :, :, 0, t] = frame
        epi[..., t] = outer
        endo[..., t] = inner
    # round through float32 so on-disk storage is lossless
    voxels = voxels.astype(np.float32).astype(np.float64)
    return GatedVolumeSequence(voxels=voxels, endo_mask=endo, epi_mask=epi)


def apply_site_shift(x: GatedVolumeSequence, shift: SiteShift, seed: int = 0) -> GatedVolumeSequence:
    """gain*x + offset, then box blur, then extra noise. Masks untouched."""
    rng = np.random.default_rng(seed)
    frames = x.voxels[:, :, :, 0, :] * shift.gain + shift.offset
    if shift.blur_radius > 0:
        size = 2 * shift.blur_radius + 1
        frames = np.stack(
            [uniform_filter(frames[..., t], size=size, mode="nearest") for t in range(x.gates)],
            axis=-1,
        )
    if shift.noise_std > 0:
        frames = frames + rng.normal(0.0, shift.noise_std, size=frames.shape)
    voxels = frames[:, :, :, None, :].astype(np.float32).astype(np.float64)
    return GatedVolumeSequence(voxels=voxels, endo_mask=x.endo_mask, epi_mask=x.epi_mask)


N_LONG_AXIS_SLICES = 32


def long_axis_slices(volume: np.ndarray) -> np.ndarray:
    """32 long-axis slices at 11.25-degree steps about the z axis.

    Each slice is [32 (z), 32 (in-plane offset)], sampled nearest-neighbor
    with the central 32 pixels retained. Pipeline-fidelity op; phantom
    volumes are generated at 32^3 directly and never pass through here
    during training.
    """
    volume = np.asarray(volume)
    if volume.shape != (32, 32, 32):
        raise ValueError(f"long-axis slicing requires a 32^3 volume, got {volume.shape}")
    c = 15.5
    u = np.arange(32) - c  # -15.5 .. 15.5
    slices = np.empty((N_LONG_AXIS_SLICES, 32, 32), dtype=volume.dtype)
    for k in range(N_LONG_AXIS_SLICES):
        phi = 2.0 * np.pi * k / N_LONG_AXIS_SLICES
        ix = np.floor(c + u * np.cos(phi) + 0.5).astype(int)
        iy = np.floor(c + u * np.sin(phi) + 0.5).astype(int)
        slices[k] = volume[:, iy, ix]
    return slices


def volume_from_slices(slices: np.ndarray) -> np.ndarray:
    """Nearest-neighbor scatter of long-axis slices back into a 32^3 volume.

    Voxels hit by several slices average their samples; unvisited voxels
    stay zero.
    """
    slices = np.asarray(slices, dtype=np.float64)
    if slices.shape != (N_LONG_AXIS_SLICES, 32, 32):
        raise ValueError(f"expected [{N_LONG_AXIS_SLICES}, 32, 32] slices, got {slices.shape}")
    acc = np.zeros((32, 32, 32))
    counts = np.zeros((32, 32, 32))
    c = 15.5
    u = np.arange(32) - c
    for k in range(N_LONG_AXIS_SLICES):
        phi = 2.0 * np.pi * k / N_LONG_AXIS_SLICES
        ix = np.floor(c + u * np.cos(phi) + 0.5).astype(int)
        iy = np.floor(c + u * np.sin(phi) + 0.5).astype(int)
        for ui in range(32):
            acc[:, iy[ui], ix[ui]] += slices[k, :, ui]
            counts[:, iy[ui], ix[ui]] += 1.0
    filled = counts > 0
    acc[filled] /= counts[filled]
    return acc


def jittered(params: PhantomParams, rng: np.random.Generator, jitter: float) -> PhantomParams:
    """Per-subject variation around the base anatomy."""
    radii = tuple(r * rng.uniform(1.0 - jitter, 1.0 + jitter) for r in params.epi_radii)
    center = tuple(c + rng.uniform(-1.0, 1.0) for c in params.center)
    return replace(params, epi_radii=radii, center=center)

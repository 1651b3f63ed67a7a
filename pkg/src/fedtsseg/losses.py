"""Training objectives: soft Dice, attention-consistency, class-weighted LMMD."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import Tensor, concat, matmul, reshape, scale, tabs, texp, tmean, transpose, tsum
from .model import AttentionMaps

BANDWIDTH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class LossWeights:
    """Balancing factors for the combined objective."""

    alpha_att: float = 0.01
    beta_lmmd: float = 100.0

    def __post_init__(self):
        for name in ("alpha_att", "beta_lmmd"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class KernelSpec:
    """Multi-Gaussian kernel bandwidths, derived per batch from the data."""

    bandwidths: tuple[float, ...]

    def __post_init__(self):
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ValueError(f"bandwidths must be positive, got {self.bandwidths}")


def dice_loss(prob: Tensor, mask: np.ndarray, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss: 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    mask = np.asarray(mask)
    if mask.shape != prob.shape:
        raise ValueError(f"mask shape {mask.shape} != prob shape {prob.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("dice_loss expects a binary mask")
    g = Tensor(mask.astype(np.float64))
    num = tsum(prob * g) * 2.0 + smooth
    den = tsum(prob) + float(mask.sum()) + smooth
    return 1.0 - num / den


def average_maps(maps: Sequence[AttentionMaps] | AttentionMaps) -> AttentionMaps:
    """Average attention maps over a batch; a single element passes through."""
    if isinstance(maps, AttentionMaps):
        return maps
    if not maps:
        raise ValueError("cannot average an empty batch of attention maps")
    t_a, s_a = maps[0].t_a, maps[0].s_a
    for m in maps[1:]:
        if m.t_a.shape != t_a.shape or m.s_a.shape != s_a.shape:
            raise ValueError("attention maps in a batch must share one configuration")
        t_a = t_a + m.t_a
        s_a = s_a + m.s_a
    inv = 1.0 / len(maps)
    return AttentionMaps(t_a=scale(t_a, inv), s_a=scale(s_a, inv))


def attention_consistency_loss(
    maps_src: Sequence[AttentionMaps] | AttentionMaps,
    maps_tgt: Sequence[AttentionMaps] | AttentionMaps,
) -> tuple[Tensor, Tensor, Tensor]:
    """Mean absolute difference of batch-averaged maps, per axis and combined."""
    src = average_maps(maps_src)
    tgt = average_maps(maps_tgt)
    if src.t_a.shape != tgt.t_a.shape or src.s_a.shape != tgt.s_a.shape:
        raise ValueError(
            "source and target maps disagree: "
            f"{src.t_a.shape}/{src.s_a.shape} vs {tgt.t_a.shape}/{tgt.s_a.shape}"
        )
    l_time = tmean(tabs(src.t_a - tgt.t_a))
    l_space = tmean(tabs(src.s_a - tgt.s_a))
    return l_time, l_space, l_time + l_space


def class_weights(soft_labels: np.ndarray) -> np.ndarray:
    """Per-sample class weights: each nonempty class column normalized to sum 1."""
    y = np.asarray(soft_labels, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError(f"soft labels must be [n, C], got {y.shape}")
    if np.any(y < 0):
        raise ValueError("soft labels must be nonnegative")
    totals = y.sum(axis=0)
    out = np.zeros_like(y)
    nonzero = totals > 0
    out[:, nonzero] = y[:, nonzero] / totals[nonzero]
    return out


def median_kernel_spec(za: np.ndarray, zb: np.ndarray) -> KernelSpec:
    """Bandwidths = multipliers x median pairwise squared distance of the pool.

    A degenerate pool (all points identical) falls back to a unit base so the
    kernel stays well defined.
    """
    pool = np.concatenate([np.asarray(za, dtype=np.float64), np.asarray(zb, dtype=np.float64)], axis=0)
    sq = _pairwise_sq_dists(pool, pool)
    iu = np.triu_indices(pool.shape[0], k=1)
    base = float(np.median(sq[iu])) if iu[0].size else 0.0
    if base <= 0.0:
        base = 1.0
    return KernelSpec(bandwidths=tuple(m * base for m in BANDWIDTH_MULTIPLIERS))


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :] - b[None, :, :]
    return (d * d).sum(axis=2)


def _sq_dists_tensor(a: Tensor, b: Tensor) -> Tensor:
    sq_a = reshape(tsum(a * a, axis=1), (a.shape[0], 1))
    sq_b = reshape(tsum(b * b, axis=1), (1, b.shape[0]))
    cross = matmul(a, transpose(b))
    return sq_a + sq_b - cross * 2.0


def gaussian_kernel(za: Tensor | np.ndarray, zb: Tensor | np.ndarray, spec: KernelSpec) -> Tensor:
    """Sum of Gaussians over the spec's bandwidths; k(z, z) equals their count."""
    ta = za if isinstance(za, Tensor) else Tensor(za)
    tb = zb if isinstance(zb, Tensor) else Tensor(zb)
    if ta.shape[1] != tb.shape[1]:
        raise ValueError(f"feature dims differ: {ta.shape} vs {tb.shape}")
    sq = _sq_dists_tensor(ta, tb)
    k = texp(sq * (-1.0 / spec.bandwidths[0]))
    for bw in spec.bandwidths[1:]:
        k = k + texp(sq * (-1.0 / bw))
    return k


def lmmd_loss(
    z_src: Tensor | np.ndarray,
    labels_src: np.ndarray,
    z_tgt: Tensor | np.ndarray,
    pseudo_tgt: np.ndarray,
    spec: KernelSpec | None = None,
) -> Tensor:
    """Class-weighted discrepancy between source and target feature sets.

    Samples are patch tokens with soft class masses over C=2 classes
    (foreground, background). Per class: wS'Kss wS + wT'Ktt wT - 2 wS'Kst wT,
    averaged over the C classes; zero-mass classes contribute nothing.
    """
    zs = z_src if isinstance(z_src, Tensor) else Tensor(z_src)
    zt = z_tgt if isinstance(z_tgt, Tensor) else Tensor(z_tgt)
    if zs.shape[1] != zt.shape[1]:
        raise ValueError(f"feature dims differ: {zs.shape} vs {zt.shape}")
    w_src = class_weights(labels_src)
    w_tgt = class_weights(pseudo_tgt)
    if w_src.shape[1] != w_tgt.shape[1]:
        raise ValueError("source and target label matrices must share classes")
    n_classes = w_src.shape[1]
    live = [
        c
        for c in range(n_classes)
        if w_src[:, c].sum() > 0 and w_tgt[:, c].sum() > 0
    ]
    if not live:
        raise ValueError("no class mass on either side; LMMD undefined")
    if spec is None:
        spec = median_kernel_spec(zs.data, zt.data)

    k_ss = gaussian_kernel(zs, zs, spec)
    k_tt = gaussian_kernel(zt, zt, spec)
    k_st = gaussian_kernel(zs, zt, spec)

    total: Tensor | None = None
    for c in live:
        ws = Tensor(w_src[:, c : c + 1])
        wt = Tensor(w_tgt[:, c : c + 1])
        term = (
            matmul(transpose(ws), matmul(k_ss, ws))
            + matmul(transpose(wt), matmul(k_tt, wt))
            + matmul(transpose(ws), matmul(k_st, wt)) * -2.0
        )
        total = term if total is None else total + term
    return reshape(scale(total, 1.0 / n_classes), ())


def total_loss(dice: Tensor, l_att: Tensor, l_lmmd: Tensor, w: LossWeights) -> Tensor:
    """Combined objective: dice + alpha * attention consistency + beta * LMMD."""
    for name, part in (("dice", dice), ("l_att", l_att), ("l_lmmd", l_lmmd)):
        if not np.all(np.isfinite(part.data)):
            raise FloatingPointError(f"non-finite {name} component: {part.data}")
    return dice + scale(l_att, w.alpha_att) + scale(l_lmmd, w.beta_lmmd)


@dataclass
class LossBreakdown:
    """Per-step scalar components, for round logging."""

    dice: float = 0.0
    att: float = 0.0
    lmmd: float = 0.0
    total: float = 0.0
    steps: int = 0

    def accumulate(self, dice: float, att: float, lmmd: float, total: float) -> None:
        self.dice += dice
        self.att += att
        self.lmmd += lmmd
        self.total += total
        self.steps += 1

    def mean(self) -> "LossBreakdown":
        n = max(self.steps, 1)
        return LossBreakdown(
            dice=self.dice / n, att=self.att / n, lmmd=self.lmmd / n, total=self.total / n, steps=n
        )

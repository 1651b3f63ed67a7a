"""Divided space-time attention encoder with a volumetric segmentation head.

Token layout: row 0 is the CLS token; patch (p, t) lives at row 1 + t*N + p
(gate-major). Within a block, each patch query attends along the temporal
axis (its own position across all gates, plus CLS) and along the spatial
axis (all positions within its own gate, plus CLS). The per-query key sets
therefore have T+1 and N+1 entries; the joint (N*T)^2 attention matrix is
never formed. The CLS query alone attends over every token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..engine import (
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    reshape,
    sigmoid,
    slice_axis,
    softmax,
    transpose,
)
from .config import ModelConfig
from .volume import GatedVolumeSequence
from .weights import WeightSet, check_complete


@dataclass
class AttentionMaps:
    """Softmax attention weights from one encoder block.

    t_a: [heads, N, T, T+1], query gate over {CLS} + gates
    s_a: [heads, T, N, N+1], query patch over {CLS} + patches
    """

    t_a: Tensor
    s_a: Tensor

    def to_numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.t_a.data.copy(), self.s_a.data.copy()


@dataclass
class SegmentationOutput:
    prob: Tensor  # [V, V, V], strictly inside (0, 1)
    features: Tensor  # [N*T, embed_dim], final-block patch tokens
    maps: AttentionMaps


@dataclass
class BlockWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def view(cls, ws: WeightSet, index: int) -> "BlockWeights":
        p = f"block{index:02d}."
        return cls(
            ln1_g=ws[p + "ln1.g"],
            ln1_b=ws[p + "ln1.b"],
            wq=ws[p + "wq"],
            wk=ws[p + "wk"],
            wv=ws[p + "wv"],
            wo=ws[p + "wo"],
            ln2_g=ws[p + "ln2.g"],
            ln2_b=ws[p + "ln2.b"],
            mlp_w1=ws[p + "mlp.w1"],
            mlp_b1=ws[p + "mlp.b1"],
            mlp_w2=ws[p + "mlp.w2"],
            mlp_b2=ws[p + "mlp.b2"],
        )


# ---------------------------------------------------------------------------
# tokenization


def _split_frames(frames: np.ndarray, patch_side: int) -> np.ndarray:
    """[V, V, V, T] -> [T*N, P^3], gate-major, blocks in (z, y, x) lexicographic order."""
    v = frames.shape[0]
    t = frames.shape[3]
    n_side = v // patch_side
    x = frames.reshape(n_side, patch_side, n_side, patch_side, n_side, patch_side, t)
    x = x.transpose(6, 0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(t * n_side**3, patch_side**3))


def patchify(x: GatedVolumeSequence, cfg: ModelConfig) -> np.ndarray:
    """Flatten a gated volume into N*T patch vectors of length P^3."""
    if x.side != cfg.volume_side:
        raise ValueError(f"volume side {x.side} != configured {cfg.volume_side}")
    if x.gates != cfg.gates:
        raise ValueError(f"window has {x.gates} gates, configured {cfg.gates}")
    return _split_frames(x.voxels[:, :, :, 0, :], cfg.patch_side)


def unpatchify(patches: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Inverse of patchify: [N*T, P^3] -> [V, V, V, 1, T]."""
    n_side = cfg.patches_per_side
    p = cfg.patch_side
    t = cfg.gates
    x = patches.reshape(t, n_side, n_side, n_side, p, p, p)
    x = x.transpose(1, 4, 2, 5, 3, 6, 0)
    side = cfg.volume_side
    return x.reshape(side, side, side, 1, t)


def patch_token_means(frames: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Per-token mean of a per-gate scalar field, e.g. mask occupancy. [N*T]"""
    return _split_frames(np.asarray(frames, dtype=np.float64), cfg.patch_side).mean(axis=1)


def embed(patches, e_mat: Tensor, e_pos: Tensor, cls_init: Tensor) -> Tensor:
    """Project patch vectors and prepend the CLS token; add positional entries."""
    pt = patches if isinstance(patches, Tensor) else Tensor(patches)
    if e_mat.shape[1] != pt.shape[1]:
        raise ValueError(
            f"embedding expects patch length {e_mat.shape[1]}, got {pt.shape[1]}"
        )
    n_tok = pt.shape[0] + 1
    if e_pos.shape[0] != n_tok:
        raise ValueError(f"positional table has {e_pos.shape[0]} rows, need {n_tok}")
    tok = matmul(pt, transpose(e_mat)) + slice_axis(e_pos, 0, 1, n_tok)
    cls_tok = cls_init + slice_axis(e_pos, 0, 0, 1)
    return concat([cls_tok, tok], axis=0)


# ---------------------------------------------------------------------------
# attention


def qkv_project(
    z_prev: Tensor, bw: BlockWeights, cfg: ModelConfig, head: int
) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head query/key/value projections of the layer-normalized tokens."""
    if head >= cfg.heads:
        raise ValueError(f"head index {head} out of range for {cfg.heads} heads")
    ln = layer_norm(z_prev, bw.ln1_g, bw.ln1_b)
    lo, hi = head * cfg.head_dim, (head + 1) * cfg.head_dim
    q = slice_axis(matmul(ln, transpose(bw.wq)), 1, lo, hi)
    k = slice_axis(matmul(ln, transpose(bw.wk)), 1, lo, hi)
    v = slice_axis(matmul(ln, transpose(bw.wv)), 1, lo, hi)
    return q, k, v


def divided_attention(
    q: Tensor, k: Tensor, v: Tensor, n_patches: int, gates: int
) -> tuple[Tensor, Tensor, Tensor]:
    """One head of divided space-time attention.

    Returns (s, t_map, s_map): aggregated values [1+N*T, D_h], the temporal
    map [N, T, T+1] and the spatial map [T, N, N+1]. The aggregation is the
    combined sum: CLS term from the temporal softmax, temporal value sum,
    and spatial value sum over the gate's patches (the spatial softmax's
    CLS entry normalizes but does not contribute a value term).
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    n, t = n_patches, gates
    d_h = q.shape[1]
    if q.shape[0] != 1 + n * t:
        raise ValueError(f"expected {1 + n * t} token rows, got {q.shape[0]}")
    inv_scale = 1.0 / np.sqrt(d_h)

    k_cls = slice_axis(k, 0, 0, 1)
    v_cls = slice_axis(v, 0, 0, 1)
    qp = slice_axis(q, 0, 1, 1 + n * t)
    kp = slice_axis(k, 0, 1, 1 + n * t)
    vp = slice_axis(v, 0, 1, 1 + n * t)

    # gate-major rows -> [T, N, D_h]
    qg = reshape(qp, (t, n, d_h))
    kg = reshape(kp, (t, n, d_h))
    vg = reshape(vp, (t, n, d_h))

    # every patch query scores the CLS key once; reused by both axes
    cls_scores = reshape(matmul(qp, transpose(k_cls)) * inv_scale, (t, n, 1))

    # temporal axis: same patch across gates
    qt = transpose(qg, (1, 0, 2))
    kt = transpose(kg, (1, 0, 2))
    vt = transpose(vg, (1, 0, 2))
    time_logits = concat(
        [transpose(cls_scores, (1, 0, 2)), matmul(qt, transpose(kt, (0, 2, 1))) * inv_scale],
        axis=2,
    )
    t_map = softmax(time_logits, axis=2)  # [N, T, T+1]
    ones_n = Tensor(np.ones((n, 1)))
    v_cls_tiled = reshape(matmul(ones_n, v_cls), (n, 1, d_h))
    s_time = matmul(t_map, concat([v_cls_tiled, vt], axis=1))  # [N, T, D_h]

    # spatial axis: same gate across patches
    space_logits = concat(
        [cls_scores, matmul(qg, transpose(kg, (0, 2, 1))) * inv_scale], axis=2
    )
    s_map = softmax(space_logits, axis=2)  # [T, N, N+1]
    s_space = matmul(slice_axis(s_map, 2, 1, n + 1), vg)  # [T, N, D_h]

    s_patches = reshape(transpose(s_time, (1, 0, 2)) + s_space, (n * t, d_h))

    # the CLS query alone attends over the full token set
    cls_logits = matmul(slice_axis(q, 0, 0, 1), transpose(k)) * inv_scale
    s_cls = matmul(softmax(cls_logits, axis=1), v)

    return concat([s_cls, s_patches], axis=0), t_map, s_map


def block_forward(
    z_prev: Tensor, bw: BlockWeights, cfg: ModelConfig
) -> tuple[Tensor, AttentionMaps]:
    """One encoder block: divided attention, output projection, MLP, residuals."""
    n, t, a = cfg.n_patches, cfg.gates, cfg.heads
    ln = layer_norm(z_prev, bw.ln1_g, bw.ln1_b)
    qf = matmul(ln, transpose(bw.wq))
    kf = matmul(ln, transpose(bw.wk))
    vf = matmul(ln, transpose(bw.wv))

    s_heads, t_maps, s_maps = [], [], []
    for head in range(a):
        lo, hi = head * cfg.head_dim, (head + 1) * cfg.head_dim
        q = slice_axis(qf, 1, lo, hi)
        k = slice_axis(kf, 1, lo, hi)
        v = slice_axis(vf, 1, lo, hi)
        s, t_map, s_map = divided_attention(q, k, v, n, t)
        s_heads.append(s)
        t_maps.append(reshape(t_map, (1, n, t, t + 1)))
        s_maps.append(reshape(s_map, (1, t, n, n + 1)))

    z_attn = matmul(concat(s_heads, axis=1), transpose(bw.wo)) + z_prev
    ln2 = layer_norm(z_attn, bw.ln2_g, bw.ln2_b)
    hidden = gelu(matmul(ln2, transpose(bw.mlp_w1)) + reshape(bw.mlp_b1, (1, cfg.mlp_dim)))
    mlp_out = matmul(hidden, transpose(bw.mlp_w2)) + reshape(bw.mlp_b2, (1, cfg.embed_dim))
    # residual from the block input, as the update rule is written
    z_out = mlp_out + z_prev
    maps = AttentionMaps(t_a=concat(t_maps, axis=0), s_a=concat(s_maps, axis=0))
    return z_out, maps


def encode(
    x: GatedVolumeSequence, ws: WeightSet, cfg: ModelConfig
) -> tuple[Tensor, AttentionMaps, Tensor]:
    """Run all blocks; keep attention maps from the last block only."""
    check_complete(ws, cfg)
    patches = patchify(x, cfg)
    tokens = embed(Tensor(patches), ws["embed"], ws["pos"], ws["cls"])
    maps: AttentionMaps | None = None
    for i in range(cfg.blocks):
        tokens, maps = block_forward(tokens, BlockWeights.view(ws, i), cfg)
    features = slice_axis(tokens, 0, 1, cfg.n_tokens)
    return tokens, maps, features


def segment_head(cls_token: Tensor, ws: WeightSet, cfg: ModelConfig) -> Tensor:
    """CLS embedding -> per-voxel probability volume via a 1-hidden-layer MLP."""
    ln = layer_norm(cls_token, ws["head.ln.g"], ws["head.ln.b"])
    hidden = gelu(matmul(ln, transpose(ws["head.w1"])) + reshape(ws["head.b1"], (1, cfg.mlp_dim)))
    logits = matmul(hidden, transpose(ws["head.w2"])) + reshape(ws["head.b2"], (1, cfg.n_voxels))
    side = cfg.volume_side
    return sigmoid(reshape(logits, (side, side, side)))


def forward(x: GatedVolumeSequence, ws: WeightSet, cfg: ModelConfig) -> SegmentationOutput:
    tokens, maps, features = encode(x, ws, cfg)
    prob = segment_head(slice_axis(tokens, 0, 0, 1), ws, cfg)
    return SegmentationOutput(prob=prob, features=features, maps=maps)

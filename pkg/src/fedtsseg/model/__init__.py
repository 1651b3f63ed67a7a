from .config import ModelConfig
from .network import (
    AttentionMaps,
    BlockWeights,
    SegmentationOutput,
    block_forward,
    divided_attention,
    embed,
    encode,
    forward,
    patch_token_means,
    patchify,
    qkv_project,
    segment_head,
    unpatchify,
)
from .volume import GatedVolumeSequence
from .weights import (
    SchemaError,
    WeightSet,
    check_complete,
    expected_names,
    init_weights,
    load_weights,
    param_count,
    save_weights,
)

__all__ = [
    "AttentionMaps",
    "BlockWeights",
    "GatedVolumeSequence",
    "ModelConfig",
    "SchemaError",
    "SegmentationOutput",
    "WeightSet",
    "block_forward",
    "check_complete",
    "divided_attention",
    "embed",
    "encode",
    "expected_names",
    "forward",
    "init_weights",
    "load_weights",
    "param_count",
    "patch_token_means",
    "patchify",
    "qkv_project",
    "save_weights",
    "segment_head",
    "unpatchify",
]

"""Fused image+text transformer encoder."""

from .checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from .model import (
    EmbeddingVector,
    ModelConfig,
    Parameters,
    adapted_weights,
    check_params,
    encode,
    encode_batch,
    init_params,
    lora_forward,
    merge_lora,
    merged_config,
    trainable_names,
)
from .tokens import (
    BOS,
    EOS,
    IMG,
    IMG_MARKER,
    PAD,
    VOCAB_SIZE,
    TokenSequence,
    build_sequence,
    decode_tokens,
    patchify,
    tokenize_text,
)

__all__ = [
    "BOS", "EOS", "IMG", "IMG_MARKER", "PAD", "VOCAB_SIZE", "EmbeddingVector", "ModelConfig",
    "Parameters", "TokenSequence", "adapted_weights", "build_sequence", "check_params",
    "decode_tokens", "dumps_checkpoint", "encode", "encode_batch", "init_params",
    "load_checkpoint", "loads_checkpoint", "lora_forward", "merge_lora", "merged_config",
    "patchify", "save_checkpoint", "tokenize_text", "trainable_names",
]

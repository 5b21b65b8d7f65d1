"""Manifests, synthetic generators and batch sampling."""

from .records import (
    TRAIN_CAP,
    DataError,
    Dataset,
    ExampleRecord,
    Side,
    load_manifest,
    record_line,
    validate_record,
    write_dataset,
    write_manifest,
)
from .sampling import BatchSampler, sample_batch
from .synthetic import SyntheticResult, SyntheticSpec, content_hash, generate_instruction_pair, generate_synthetic

__all__ = [
    "TRAIN_CAP", "BatchSampler", "DataError", "Dataset", "ExampleRecord", "Side", "SyntheticResult",
    "SyntheticSpec", "content_hash", "generate_instruction_pair", "generate_synthetic", "load_manifest",
    "record_line", "sample_batch", "validate_record", "write_dataset", "write_manifest",
]

from .decoder import (
    DegenerateBatchError,
    EmbeddingConfigError,
    FusedDistribution,
    TransformerDecoder,
    WordEmbedding,
    fuse,
    fused_ce_loss,
    load_embedding_table,
    masked_nll,
    save_embedding_table,
)
from .encoder import EncoderOutput, InputTooShortError, RPANNsEncoder, align_time, pooled_length
from .lhdff import LHDFF, MODES, ModelConfig, ParameterReport, check_mode

__all__ = [
    "DegenerateBatchError",
    "EmbeddingConfigError",
    "EncoderOutput",
    "FusedDistribution",
    "InputTooShortError",
    "LHDFF",
    "MODES",
    "ModelConfig",
    "ParameterReport",
    "RPANNsEncoder",
    "TransformerDecoder",
    "WordEmbedding",
    "align_time",
    "check_mode",
    "fuse",
    "fused_ce_loss",
    "load_embedding_table",
    "masked_nll",
    "pooled_length",
    "save_embedding_table",
]

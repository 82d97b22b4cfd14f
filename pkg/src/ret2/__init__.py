"""Recurrent multimodal fusion encoder for dense retrieval over precomputed backbone features."""

from .cell import (
    CellConfig,
    EncoderOutput,
    FusionCellParams,
    GateOverride,
    embed,
    encode,
    encode_batch,
    load_checkpoint,
    save_checkpoint,
    select_layers,
)
from .estimators import FlatRetriever, Ret2Encoder
from .features import CorpusRecord, LayerFeatures, Modality, read_features, write_features
from .index import IndexShard, RetrievalResult, pseudo_recall_at_k, recall_at_k
from .scoring import infonce, maxsim, score_fusion
from .synth import SynthConfig, synth_corpus
from .training import TrainConfig, train

__all__ = [
    "CellConfig", "CorpusRecord", "EncoderOutput", "FlatRetriever", "FusionCellParams",
    "GateOverride", "IndexShard", "LayerFeatures", "Modality", "Ret2Encoder", "RetrievalResult",
    "SynthConfig", "TrainConfig", "embed", "encode", "encode_batch", "infonce",
    "load_checkpoint", "maxsim", "pseudo_recall_at_k", "read_features", "recall_at_k",
    "save_checkpoint", "score_fusion", "select_layers", "synth_corpus", "train",
    "write_features",
]
__version__ = "0.1.0"

"""Semantic ID toolkit: residual-quantization tokenizers, a SID-to-item
index with collision handling, and desk-scale generative retrieval."""

from .checkpoint import load_model, save_model
from .config import PipelineConfig, load_config, parse_config
from .data import Corpus, EmbeddingRecord, ingest_embeddings
from .experiments import run_experiment
from .fusion import FusionConfig, ModalitySpec, fuse_encode, multi_decode
from .genret import (
    GrConfig,
    GrTransformer,
    NgramModel,
    SidTrie,
    SidVocabulary,
    beam_search_constrained,
    eval_recall_ndcg,
    retrieve,
)
from .sid_index import (
    SidIndex,
    allocate_budget,
    assign_dedup_tokens,
    breadth_mode,
    build_index,
    depth_mode,
    resolve,
    uniqueness,
    utilization_metrics,
)
from .synth import SyntheticSpec, gen_synthetic, standard_benchmark_spec
from .tokenizer import (
    Codebook,
    RqKmeansTokenizer,
    SemanticId,
    TokenizerModel,
    TrainConfig,
    build_rqvae,
    decode,
    quantize,
    rq_kmeans_fit,
    tokenize_corpus,
    train,
)

__all__ = [
    "Codebook",
    "Corpus",
    "EmbeddingRecord",
    "FusionConfig",
    "GrConfig",
    "GrTransformer",
    "ModalitySpec",
    "NgramModel",
    "PipelineConfig",
    "RqKmeansTokenizer",
    "SemanticId",
    "SidIndex",
    "SidTrie",
    "SidVocabulary",
    "SyntheticSpec",
    "TokenizerModel",
    "TrainConfig",
    "allocate_budget",
    "assign_dedup_tokens",
    "beam_search_constrained",
    "breadth_mode",
    "build_index",
    "build_rqvae",
    "decode",
    "depth_mode",
    "eval_recall_ndcg",
    "fuse_encode",
    "gen_synthetic",
    "ingest_embeddings",
    "load_config",
    "load_model",
    "multi_decode",
    "parse_config",
    "quantize",
    "resolve",
    "retrieve",
    "rq_kmeans_fit",
    "run_experiment",
    "save_model",
    "standard_benchmark_spec",
    "tokenize_corpus",
    "train",
    "uniqueness",
    "utilization_metrics",
]

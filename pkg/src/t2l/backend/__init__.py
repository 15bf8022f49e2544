from .base import (
    NORM_EPS,
    RELEVANCY_RESOLUTION,
    BackendError,
    EmbeddingBackend,
    InputError,
    RelevancyMap,
    SpatialTokens,
    UnsupportedCapabilityError,
    cosine_distance,
    normalize,
)
from .rollout import attention_rollout, minmax_normalize
from .synthetic import synthetic_architecture, synthetic_backend
from .tokenizer import BPETokenizer, HashTokenizer
from .transformer import BackendArchitecture, DualEncoder, TransformerBackend
from .weights import (
    CACHE_ENV_VAR,
    WeightFetchError,
    architecture_from_state_dict,
    default_cache_dir,
    fetch_file,
    load_checkpoint_state_dict,
    reference_backend,
)

__all__ = [
    "NORM_EPS",
    "RELEVANCY_RESOLUTION",
    "BackendError",
    "EmbeddingBackend",
    "InputError",
    "RelevancyMap",
    "SpatialTokens",
    "UnsupportedCapabilityError",
    "cosine_distance",
    "normalize",
    "attention_rollout",
    "minmax_normalize",
    "synthetic_architecture",
    "synthetic_backend",
    "BPETokenizer",
    "HashTokenizer",
    "BackendArchitecture",
    "DualEncoder",
    "TransformerBackend",
    "CACHE_ENV_VAR",
    "WeightFetchError",
    "architecture_from_state_dict",
    "default_cache_dir",
    "fetch_file",
    "load_checkpoint_state_dict",
    "reference_backend",
]

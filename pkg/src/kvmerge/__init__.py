"""Hessian-aware adjacent KV merging for attention caches."""

from .attention import AttentionSnapshot, HessianBlock, attention_forward, hessian_block, key_gradient
from .cache import CacheEntry, CompressionConfig, KvCache, cache_stats, select_pairs
from .merge import (
    MergeWeights,
    SensitivityTriple,
    merge_key_asymkv,
    merge_key_closed_form,
    merge_key_exact,
    merge_key_mean,
    merge_key_weight_form_exact,
    merge_value,
    merge_weights_gradient_free,
    sensitivity_vectors,
)
from .spectral import SpectralProfile, adjacent_similarity, concentration_stats, mode_contributions, spectral_profile

__version__ = "0.1.0"

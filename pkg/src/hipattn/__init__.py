"""Hierarchically pruned attention: tree-search mask estimation and block-sparse attention."""
from .config import ConfigError, EnsembleConfig, HipConfig, config_from_dict, load_config
from .decode import DecodeTrace, SyntheticModel, decode_run, new_synthetic_model
from .ensemble import ensemble_block_mask, sample_random_mask, vote_masks
from .mask import BlockMask, NodeSet, OpCounters, estimate_block_mask, score_branch, split_node, top_r_select
from .oracle import (
    EmptyMaskWarning,
    MaskMetrics,
    dense_attention,
    exact_topk_mask,
    mask_metrics,
    masked_attention,
)
from .pipeline import hip_attention
from .sparse import EffectiveMask, sparse_attention, union_effective_mask
from .tensors import gen_random, read_tensor, write_tensor

__version__ = "0.1.0"

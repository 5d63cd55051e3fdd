"""Sparse random parameter adaptation (SpaRTA) for small decoder-only transformers."""

__version__ = "0.1.0"

from .adapter import (IndexSet, SparseDelta, SparsityConfig, gather_grads, inference_merge,
                      merge, merged, sample_for_budget, sample_indices, unmerge)
from .baselines import AdapterSpec, LoraAdapter, full_ft_spec, head_only_spec, init_lora
from .kernels import BACKEND
from .memory import MemoryReport, memory_report, savings_fraction
from .model import ModelConfig, ParameterStore, ParamType, count_params, forward, init_params, swap_head
from .optim import AdamState, adam_step
from .train import TrainConfig, evaluate, train

__all__ = [
    "AdamState", "AdapterSpec", "BACKEND", "IndexSet", "LoraAdapter", "MemoryReport",
    "ModelConfig", "ParamType", "ParameterStore", "SparseDelta", "SparsityConfig", "TrainConfig",
    "adam_step", "count_params", "evaluate", "forward", "full_ft_spec", "gather_grads",
    "head_only_spec", "inference_merge", "init_lora", "init_params", "memory_report", "merge",
    "merged", "sample_for_budget", "sample_indices", "savings_fraction", "swap_head", "train",
    "unmerge",
]

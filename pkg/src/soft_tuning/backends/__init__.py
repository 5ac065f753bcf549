from .base import DEFAULT_FINETUNE_PARAMS, ModelBackend, NextTokenDistribution, SamplingConfig
from .mock import MockBackend
from .ngram import EOS_TOKEN, UNK_TOKEN, NGramBackend, NGramModel

__all__ = [
    "DEFAULT_FINETUNE_PARAMS",
    "ModelBackend",
    "NextTokenDistribution",
    "SamplingConfig",
    "MockBackend",
    "NGramBackend",
    "NGramModel",
    "EOS_TOKEN",
    "UNK_TOKEN",
]

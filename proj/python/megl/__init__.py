"""Explanation-guided classifier training with visual and textual rationales."""

import torch  # noqa: F401  loads libtorch before the extension

from ._core import (
    Config,
    Error,
    Model,
    bleu4,
    cider,
    generate_synthetic,
    manifest_stats,
    miou,
    read_image,
    rouge_l,
    tokenize,
    train,
)

__all__ = [
    "Config",
    "Error",
    "Model",
    "bleu4",
    "cider",
    "generate_synthetic",
    "manifest_stats",
    "miou",
    "read_image",
    "rouge_l",
    "tokenize",
    "train",
]

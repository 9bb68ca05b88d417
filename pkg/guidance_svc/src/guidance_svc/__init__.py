"""Standalone guidance service for street-scene splat training.

Serves denoised guidance images over a binary socket protocol. The
denoiser is a deliberately tiny stand-in for a latent diffusion model:
real conditioning plumbing (token concatenation, depth fusion, condition
dropout, two-stage freeze/copy training semantics) around a two-layer
convolutional noise predictor.
"""

from .embedding import (
    ConditionEmbedding,
    EncoderBank,
    ShapeMismatch,
    embed_conditions,
)
from .denoiser import (
    DenoiserState,
    denoise,
    init_state,
    load_state,
    save_state,
    stage1_grads,
    stage1_loss,
    stage2_grads,
    stage2_loss,
)

__all__ = [
    "ConditionEmbedding",
    "EncoderBank",
    "ShapeMismatch",
    "embed_conditions",
    "DenoiserState",
    "denoise",
    "init_state",
    "load_state",
    "save_state",
    "stage1_grads",
    "stage1_loss",
    "stage2_grads",
    "stage2_loss",
]

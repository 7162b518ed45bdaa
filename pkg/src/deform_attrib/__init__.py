"""Adversarial deformation fields for visual attribution.

A generator learns a displacement field that warps a diseased image until a
critic can no longer tell it from healthy ones; the field (or the resulting
difference map) shows what the critic treated as disease evidence. An
additive difference-map generator is included as a baseline.
"""

from .evaluation import EvalReport, PairedSample, evaluate, ncc
from .losses import (
    LossWeights, critic_loss, critic_objective, generator_adv_loss,
    generator_objective, gradient_penalty, l1_map_penalty, tv_penalty,
)
from .models import Critic, CriticConfig, GeneratorConfig, UNetGenerator, modify
from .synthdata import Corpus, SyntheticSpec, generate_corpus, generate_subject
from .train import TrainConfig, Trainer
from .warp import apply_deformation, difference_map

__version__ = "0.1.0"

"""Unsupervised cross-domain person re-identification with camera-style imitation."""

from .data import DomainDataset, ImageRecord, SyntheticWorldSpec, load_domain, synthesize_world
from .evaluation import RankingResult, evaluate
from .losses import PRESETS, LossWeights, batch_hard_triplet_loss, total_loss
from .model import ModelConfig, ReIDModel, init_model
from .sampling import BatchRecipe, StreamSampler, TrainData
from .style import DomainIndex, GanConfig, ParametricEngine, train_style_engine
from .training import Schedule, lr_at, run_training

__version__ = "0.1.0"

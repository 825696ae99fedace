"""Cold-warm hybrid recommender with a popularity-dependent stochastic gate."""
from .data import ContentBundle, InteractionLog, PopularityTable, build_popularity
from .encoders import AnalyzerConfig, ContentFeatures
from .errors import (CWHError, ConfigError, DataError, EvaluationError, ModelError, SplitError,
                     TrainingError)
from .evaluator import evaluate_split, hit_rate_at_k, mrr_at_k
from .network import CWHModel, ModelParams, load_checkpoint, save_checkpoint
from .splitter import SplitBundle, make_split
from .synth import SynthConfig, generate
from .trainer import TrainConfig, Trainer, train

__version__ = "0.1.0"

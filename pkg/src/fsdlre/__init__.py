"""Few-shot document-level relation extraction: episodes, relation-aware
prototypes, meta-training and macro-F1 evaluation."""

from .corpus import (
    Corpus,
    Document,
    Entity,
    Mention,
    RelationSplit,
    RelationType,
    Triple,
    load_corpus,
    load_relation_catalog,
    load_relation_split,
)
from .episodes import (
    Episode,
    EpisodeConfig,
    make_episode,
    nota_rate,
    read_episode_file,
    sample_episodes,
    write_episode_file,
)
from .errors import (
    ConfigError,
    FsdlreError,
    InvariantError,
    NumericError,
    SamplingExhaustedError,
    SchemaError,
)
from .encoders import ToyEncoderProvider, make_provider
from .evaluation import PredictionSet, ScoreReport, evaluate_episodes, macro_f1, predict_episode
from .model import EpisodeModel, ModelConfig
from .training import TrainConfig, hyperparameter_defaults, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "Corpus",
    "Document",
    "Entity",
    "Episode",
    "EpisodeConfig",
    "EpisodeModel",
    "FsdlreError",
    "InvariantError",
    "Mention",
    "ModelConfig",
    "NumericError",
    "PredictionSet",
    "RelationSplit",
    "RelationType",
    "SamplingExhaustedError",
    "SchemaError",
    "ScoreReport",
    "ToyEncoderProvider",
    "TrainConfig",
    "Triple",
    "evaluate_episodes",
    "hyperparameter_defaults",
    "load_corpus",
    "load_relation_catalog",
    "load_relation_split",
    "macro_f1",
    "make_episode",
    "make_provider",
    "nota_rate",
    "predict_episode",
    "read_episode_file",
    "sample_episodes",
    "train",
    "write_episode_file",
    "__version__",
]

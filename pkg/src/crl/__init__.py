"""Class rectification losses for imbalanced multi-attribute classification, in numpy."""

from .datagen import AttributeSchema, Dataset, GeneratorSpec, generate_synthetic, load_dataset, save_dataset, split
from .errors import (ConfigError, ContractError, CRLError, DatasetFormatError, EvaluationError, NumericInputError,
                     SchemaViolationError, TrainingDiverged)
from .losses import (HistogramSpec, LossBundle, MarginSpec, combined_loss, crl_absolute, crl_distribution,
                     crl_relative, cross_entropy, margin)
from .network import ModelConfig, Parameters, backward, forward, init_params, predict, sgd_step

__version__ = "0.1.0"

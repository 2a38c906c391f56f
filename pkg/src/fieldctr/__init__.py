"""CTR backbones with field-semantic enhancements, in NumPy."""

from .data import FeatureVocab, FieldSchema, FieldSpec, build_vocab, encode, ingest_table, load_schema, temporal_split
from .enhancement import LAMBDA_GRID, FieConfig, FreConfig
from .estimator import FieldCTRClassifier
from .metrics import auc, evaluate, logloss, relaimpr
from .model import BACKBONES, init_bundle, load_checkpoint, save_checkpoint
from .semantics import field_interaction_matrix, load_field_embeddings, synthetic_encode
from .training import TrainConfig, fit_bundle, grad_check

__version__ = "0.1.0"

__all__ = [
    "BACKBONES", "LAMBDA_GRID", "FeatureVocab", "FieConfig", "FieldCTRClassifier", "FieldSchema", "FieldSpec",
    "FreConfig", "TrainConfig", "auc", "build_vocab", "encode", "evaluate", "field_interaction_matrix",
    "fit_bundle", "grad_check", "ingest_table", "init_bundle", "load_checkpoint", "load_field_embeddings",
    "load_schema", "logloss", "relaimpr", "save_checkpoint", "synthetic_encode", "temporal_split",
]

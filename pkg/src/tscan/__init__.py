"""Temporal-spatial correlation attention network for clinical time series.

Library surface: a minimal autodiff engine (``autodiff``), transformer
building blocks (``layers``), the two-branch fusion network (``model``),
the CSV episode pipeline and synthetic cohort generator (``pipeline``),
the training loop and logistic baseline (``training``), evaluation metrics
(``metrics``), and figure rendering (``plots``). The ``tscan`` console
script wires them into reproducible experiments.
"""

__version__ = "0.1.0"

from .autodiff import Node, ParamStore, ShapeError, Tensor, backward
from .layers import AttentionWeights, LayerConfig, positional_encoding
from .metrics import EvalResult, auc_pr, auc_roc, kappa_linear, mad_hours
from .model import (AttentionReport, ModelConfig, TSCANModel,
                    attention_report, chunk_sample)
from .pipeline import (Episode, EventRecord, Sample, StayRecord,
                       VariableDictionary, extract_samples, load_dictionary,
                       synth_cohort)
from .training import TrainConfig, TrainLog, logistic_baseline, train

__all__ = [
    "__version__",
    "Node", "ParamStore", "ShapeError", "Tensor", "backward",
    "AttentionWeights", "LayerConfig", "positional_encoding",
    "EvalResult", "auc_pr", "auc_roc", "kappa_linear", "mad_hours",
    "AttentionReport", "ModelConfig", "TSCANModel", "attention_report",
    "chunk_sample",
    "Episode", "EventRecord", "Sample", "StayRecord", "VariableDictionary",
    "extract_samples", "load_dictionary", "synth_cohort",
    "TrainConfig", "TrainLog", "logistic_baseline", "train",
]

"""Desk-scale laboratory for LLM unlearning.

Trains a tiny autoregressive language model from scratch, unlearns with
smoothed gradient ascent and a dozen baseline objectives, analyzes the
optimal smoothing rate in closed form, and evaluates with the full
forgetting/utility metric suite.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .checkpoint import Checkpoint, ModelConfig
from .corpus import Corpora, CorpusSpec, QARecord, synth_corpus
from .harness import ExperimentConfig, RunManifest, export_tables, run_pipeline
from .metrics import MetricReport, bleu, forget_quality, mia_auc, privleak, rouge_l
from .normal_data import NormalSet, build_normal_set
from .objectives import (
    SmoothedLabel,
    UnlearnMethodConfig,
    gls_smooth,
    gradient_ascent_loss,
    sga_label,
    sga_loss,
)
from .smoothing import (
    GradientBundle,
    deflection_vector,
    optimal_smoothing_rate,
    sign_profile,
    update_vector,
)
from .tokenizer import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND", "Checkpoint", "ModelConfig", "Corpora", "CorpusSpec",
    "QARecord", "synth_corpus", "ExperimentConfig", "RunManifest",
    "export_tables", "run_pipeline", "MetricReport", "bleu", "forget_quality",
    "mia_auc", "privleak", "rouge_l", "NormalSet", "build_normal_set",
    "SmoothedLabel", "UnlearnMethodConfig", "gls_smooth",
    "gradient_ascent_loss", "sga_label", "sga_loss", "GradientBundle",
    "deflection_vector", "optimal_smoothing_rate", "sign_profile",
    "update_vector", "Vocabulary", "__version__",
]

"""Deconfounding autoencoders: shared/private factorized embeddings aligned
across two data domains via MMD or adversarial critic training, with
baselines, a data pipeline, and an evaluation harness."""

from .autodiff import Tensor, backward, grad_norm_penalty, no_grad
from .data import ExpressionDataset, SynthSpec, synth_generate
from .evaluation import EvalReport, auprc, auroc, elastic_net_fit, welch_t_test
from .losses import KernelConfig, LossWeights
from .models import CodeAeModel, ModelConfig, ModelVariant, build_model
from .train import ProtocolConfig, TrainingSchedule, finetune, pretrain, run_protocol

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_norm_penalty", "no_grad",
    "ExpressionDataset", "SynthSpec", "synth_generate",
    "EvalReport", "auprc", "auroc", "elastic_net_fit", "welch_t_test",
    "KernelConfig", "LossWeights",
    "CodeAeModel", "ModelConfig", "ModelVariant", "build_model",
    "ProtocolConfig", "TrainingSchedule", "finetune", "pretrain", "run_protocol",
    "__version__",
]

"""Unified masked discrete diffusion over text and image tokens, at toy scale."""

from .backbone import ElasticMoT, ModelConfig, ParamReport, TaskMode, ToyPredictor, build_model, param_report
from .diffusion import (IncompleteDecodeError, PredictorOutput, TimeGrid, forward_mask, mdm_loss, reverse_posterior,
                        sample, threshold_decode)
from .samplers import UnmaskOrder, coverage_metrics, halton_order, stratified_order, uniform_order
from .vocab import GEN, UND, SequenceState, Tokenizer, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "ElasticMoT", "ModelConfig", "ParamReport", "TaskMode", "ToyPredictor", "build_model", "param_report",
    "IncompleteDecodeError", "PredictorOutput", "TimeGrid", "forward_mask", "mdm_loss", "reverse_posterior",
    "sample", "threshold_decode", "UnmaskOrder", "coverage_metrics", "halton_order", "stratified_order",
    "uniform_order", "GEN", "UND", "SequenceState", "Tokenizer", "Vocabulary",
]

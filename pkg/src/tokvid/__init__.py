"""Masked discrete flow models for token videos: corruption, samplers,
chunkwise rollout, NFE accounting and a synthetic evaluation harness."""

from .corruption import MaskSchedule, corrupt, fused_snr_weights, kappa, masked_ce_loss
from .nfe import plan_nfe, predicted_nfe
from .predictors import (CountingPredictor, MLPPredictor, OraclePredictor, TabularPredictor,
                         load_checkpoint, oracle_predict)
from .rollout import plan_chunks, rollout_video
from .samplers import SamplerConfig, SamplerMode, guided_logits, sample_chunk
from .synthetic import SyntheticProcess, evaluate_rollout, exact_chunk_conditional, gen_video
from .training import TrainConfig, train
from .types import Chunk, TimestepVector, TokenVideo, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Chunk", "CountingPredictor", "MLPPredictor", "MaskSchedule", "OraclePredictor",
    "SamplerConfig", "SamplerMode", "SyntheticProcess", "TabularPredictor", "TimestepVector",
    "TokenVideo", "TrainConfig", "Vocabulary", "corrupt", "evaluate_rollout",
    "exact_chunk_conditional", "fused_snr_weights", "gen_video", "guided_logits", "kappa",
    "load_checkpoint", "masked_ce_loss", "oracle_predict", "plan_chunks", "plan_nfe",
    "predicted_nfe", "rollout_video", "sample_chunk", "train",
]

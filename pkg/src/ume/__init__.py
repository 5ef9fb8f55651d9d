"""Unified multi-speaker encoder: joint diarization, separation, and
multi-speaker recognition on synthetic tone mixtures, trained end to end on
a small reverse-mode autodiff engine."""

from .asr import AsrConfig, Hypothesis, ctc_loss, greedy_collapse
from .config import EvalConfig, RunConfig, load_run_config, parse_run_config
from .diar import frame_labels_from_spans, pit_bce_loss
from .encoder import EncoderConfig, rwse, weighted_sum
from .evaluate import evaluate
from .metrics import der, sdr_metric, si_snr_metric, wer_optimal_perm
from .model import JointModel, ModelConfig, build_model
from .optim import Parameter, adamw_step, grad_check
from .sep import SepConfig, si_sdr_pit_loss
from .simulate import (DatasetConfig, MixtureSample, UtteranceSpec, generate_dataset,
                       read_dataset, synth_utterance, write_dataset)
from .tensor import Tensor, apply_primitive, backward
from .trainer import LossWeights, TrainConfig, lr_schedule, pretrain_asr, total_loss, train

__version__ = "0.1.0"

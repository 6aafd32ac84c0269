"""Desk-scale lab for end-to-end test-time training of byte-level language models.

Modules: tensor (reverse-mode autodiff with higher-order gradients and FLOP
accounting), model (the transformer family with slow/fast parameter
partition), ttt (inner-loop training and the naive / end-to-end
objectives), kvb (the key-value-binding variant ladder), train (outer-loop
AdamW), data (byte corpora and retrieval tasks), evaluate (loss breakdowns,
sampling, benchmarks), cli (experiment front-end).
"""

__version__ = "0.1.0"

from . import tensor
from .config import EvalSettings, ExperimentConfig, load_config, save_config
from .data import NIAHInstance, PackedSequence, encode_bytes, decode_bytes, gen_niah, ingest
from .evaluate import EvalReport, bench, loss_breakdown, loss_delta, sample_next
from .kvb import KVBLayerParams, build_variant, kvb_loss, kvb_output, kvb_output_simplified
from .model import ModelSpec, ParamSet, build_model, forward, load_params, save_params
from .tensor import Tensor, checkpoint, flop_scope, flops, grad, no_grad
from .train import AdamW, TrainRecipe, finetune_run, lr_at, train_run
from .ttt import (
    InnerTrajectory,
    TTTConfig,
    decode_with_ttt,
    inner_step,
    loss_e2e,
    loss_naive,
    prefill_with_ttt,
)

"""Deterministic simulator for federated fine-tuning with split-block
zero-order optimization.

The package is organized around the protocol's moving parts:

    prng        replayable Gaussian perturbation engine (the seed trick)
    models      forward-only MLPs with a cut layer, backprop oracle, checkpoints
    estimators  projected-gradient estimators and the split training step
    protocol    client training, payload codec, bit-exact server replay
    costs       FLOP formulas, live counters, payload bytes, memory model
    data        blob generator, CSV ingestion, client partitioning
    config      YAML experiment configs
    experiment  run orchestration, metrics emission, comparison reports
"""

from .config import ExperimentConfig, load_config
from .costs import CostLedger, payload_bytes, peak_memory_model
from .data import Dataset, make_blobs, partition
from .errors import ConfigError, ContractViolation, NumericError
from .estimators import (SplitConfig, g1_from_losses, projected_gradient_central,
                         projected_gradient_forward, spzo_step)
from .experiment import compare_report, run_experiment
from .models import (Batch, BlockSplit, ModelSpec, backprop_gradient, forward_block1,
                     forward_block2, forward_loss, init_params, mlp_spec)
from .prng import (GaussianStream, SeedStream, fold_seed, perturb_in_place,
                   standard_normals, update_in_place)
from .protocol import (ClientPayload, StepRecord, aggregate, client_sampler,
                       client_train, decode_payload, encode_payload, reconstruct)

__version__ = "0.1.0"

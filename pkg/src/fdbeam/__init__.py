"""Full-duplex massive MIMO beamforming with learned self-interference probing."""

from .arrays import ArrayConfig, dft_codebook, element_positions, steering_vector
from .baselines import BaselineResult, csi_bounds, lmmse_baseline, mrt_beam
from .channels import (
    LinkBudget,
    SceneRealization,
    SIChannel,
    SiteCalibration,
    SiteModel,
    UserPairChannel,
    assemble_si,
    calibrate_budget,
    los_si_channel,
    make_site,
    nlos_si_channel,
    sample_scene,
)
from .data import Dataset, build_dataset, calibrate_site, load_dataset
from .evaluation import EvalRow, SweepSpec, evaluate_method, run_sweep
from .metrics import BeamPair, LinkReport, capacity, effective_nsse, link_report
from .model import (
    BeamformerPolicy,
    ModelConfig,
    build_model,
    load_checkpoint,
    negative_sum_nsse,
    realify_user_info,
    save_checkpoint,
)
from .probing import MeasurementRecord, ProbingCodebooks, measure, normalize_tx_beam
from .training import TrainConfig, finetune, pretrain

__version__ = "0.1.0"

"""GAN training with an ensemble of frozen pretrained-feature discriminators."""

from .bank import FeatureExtractorSpec, FeatureOutput, ModelBank, desk_bank
from .heads import Head, LogitSet, build_head, head_forward
from .selection import ProbeResult, SelectionState, k_fixed_select, linear_probe, rank_models, select_next
from .augment import AugPolicy, adapt, augment
from .training import EnsembleState, train_step, vision_aided_loss
from .metrics import MetricReport, evaluate, fid, kid, precision_recall
from .config import ExperimentConfig, parse_config
from .trainer import Trainer

__version__ = "0.1.0"

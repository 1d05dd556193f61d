"""driftlab: a desk-scale laboratory for active test-time adaptation.

A source-pretrained MLP classifier adapts online to a stream of corrupted
batches, annotating at most one sample per batch (or per several batches)
chosen by feature-perturbation sensitivity, with the supervised and
unsupervised gradients balanced by EMA-smoothed dynamic weights.
"""

from .config import ConfigError, RunConfig, parse_config, serialize_config
from .engine import AdaptationEngine, DebiasState, EngineConfig, ReplayBuffer, \
    debias_weights, ema_update, run_episode
from .gradcheck import run_gradcheck
from .metrics import RunReport, export_csv, export_json
from .model import ArchSpec, ModelState, OptimizerState, cross_entropy, entropy, \
    forward, init_model, softmax
from .oracle import AnnotationExchange, Oracle, OracleConfig
from .presets import PRESET_NAMES, preset_config, preset_text
from .runner import execute_ablation, execute_run, pretrain_from_config
from .selection import AnnotationBudget, SelectionState, confidence_diff, \
    confident_mask, select_baseline, select_for_annotation
from .snapshots import Snapshot
from .stream import Batch, CorruptionSpec, DomainSpec, EpisodeSpec, EpisodeStream, \
    SourceSpec, blob_source, corrupt, load_dataset_file, make_source_dataset, \
    pretrain_source
from .toy import run_toy_experiment

__version__ = "0.1.0"

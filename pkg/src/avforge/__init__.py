"""Audio-visual temporal forgery localization and deepfake detection toolkit."""

from .intervals import (
    Interval,
    FrameTarget,
    FrameTargets,
    Proposal,
    iou_1d,
    diou_penalty,
    encode_frame_targets,
    decode_frame,
    merge_proposals,
)
from .divergence import (
    edit_delta,
    normalized_divergence,
    corpus_summary,
    cross_stream_divergence,
)
from .syndata import Sample, SyntheticConfig, generate_dataset, read_dataset, write_dataset
from .model import ModelConfig, Network, load_checkpoint, save_checkpoint
from .losses import (
    LossBreakdown,
    check_gradients,
    loss_dfd_bce,
    loss_diou,
    loss_focal,
    loss_smooth_l1,
    loss_tfl_composite,
)
from .metrics import EvalRecord, accuracy, ap_at_iou, ar_at_n, binary_ap, roc_auc
from .trainer import TrainConfig, evaluate, train
from .estimators import DeepfakeDetector, TemporalForgeryLocalizer

__version__ = "0.1.0"

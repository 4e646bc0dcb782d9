"""PPG motion-artifact segmentation toolkit.

Per-sample binary segmentation of 30 s photoplethysmogram windows with a
small 1-D fully convolutional network, contrastive training, BN-scale
channel pruning, and a bounded-memory streaming inference runtime.
"""

__version__ = "0.1.0"

from .data import (FilterSpec, RawRecording, SignalSegment, SyntheticConfig,
                   bandpass_filter, generate_synthetic, load_dataset,
                   minmax_normalize, save_dataset, segment_and_normalize)
from .model import ModelConfig, TinyPPG, build_model, count_parameters, load_model, save_model
from .losses import LossConfig, MemoryBank, bce_loss, contrastive_loss, sample_anchors, total_loss
from .training import (ConfusionCounts, SplitSpec, TrainConfig, dice, evaluate,
                       export_embeddings, lr_at, split_subjects, train)
from .pruning import PruneConfig, apply_prune, compact, finetune, rank_channels
from .runtime import ArenaExecutor, MemoryPlan, StreamStats, infer_stream, plan_memory

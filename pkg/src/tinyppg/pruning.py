"""Channel pruning driven by batch-norm scale magnitudes.

Channels of the per-block pointwise convolutions are ranked globally by
|gamma|, the lowest are zeroed under a per-layer survivor floor, and
`compact` rebuilds a physically smaller network whose outputs match the
masked one.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError
from .losses import LossConfig
from .model import ModelConfig, TinyPPG, build_model
from .training import TrainConfig, train


@dataclass
class PruneConfig:
    ratio: float = 0.5
    finetune_epochs: int = 20
    finetune_lr: float = 0.0005
    finetune_loss: LossConfig = field(default_factory=lambda: LossConfig(strategy="off"))

    def validate(self):
        if not (0.0 <= self.ratio < 1.0):
            raise ConfigError(f"prune ratio must be in [0, 1), got {self.ratio}")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")


@dataclass
class ChannelRank:
    """Global ascending order of (block index, channel, |gamma|)."""
    entries: list

    def __len__(self):
        return len(self.entries)


def rank_channels(model: TinyPPG) -> ChannelRank:
    """Rank every prunable channel by |gamma|, ties by (block, channel)."""
    entries = []
    for b, bn in enumerate(model.block_bns()):
        for c in range(bn.gamma.shape[0]):
            entries.append((b, c, float(abs(bn.gamma[c]))))
    entries.sort(key=lambda e: (e[2], e[0], e[1]))
    return ChannelRank(entries)


def apply_prune(model: TinyPPG, cfg: PruneConfig) -> TinyPPG:
    """Return a masked copy with the lowest-ranked channels zeroed.

    floor(ratio * total) channels are removed globally; a layer that would
    be emptied keeps its single best channel and the deficit moves to the
    next-ranked channels elsewhere.
    """
    cfg.validate()
    pruned = copy.deepcopy(model)
    rank = rank_channels(pruned)
    target = int(np.floor(cfg.ratio * len(rank)))
    survivors = [block.out_channels for block in pruned.blocks]
    masks = [np.ones(block.out_channels, dtype=np.float32) for block in pruned.blocks]
    removed = 0
    for b, c, _score in rank.entries:
        if removed >= target:
            break
        if survivors[b] <= 1:
            continue
        masks[b][c] = 0.0
        survivors[b] -= 1
        removed += 1
    for block, mask in zip(pruned.blocks, masks):
        block.mask = mask
        zero = mask == 0.0
        if zero.any():
            if block.standard:
                block.conv.w[zero] = 0.0
                block.conv.b[zero] = 0.0
            else:
                block.pw.w[zero] = 0.0
                block.pw.b[zero] = 0.0
            block.bn.gamma[zero] = 0.0
            block.bn.beta[zero] = 0.0
    pruned.metadata = dict(pruned.metadata, pruned_ratio=cfg.ratio)
    return pruned


def compact(masked: TinyPPG) -> TinyPPG:
    """Physically drop masked channels and return the smaller dense model.

    Output channels of block i shrink together with block i+1's depthwise
    channels and pointwise input channels; pyramid branches and the
    projection head lose the matching input channels. Forward outputs
    match the masked model to float32 accumulation noise.
    """
    if not masked.has_mask():
        raise StateError("compact requires a model with a prune mask")
    keep = []
    for block in masked.blocks:
        mask = block.mask if block.mask is not None else np.ones(block.out_channels, dtype=np.float32)
        keep.append(np.flatnonzero(mask > 0))
    new_specs = tuple((int(k.shape[0]), blk.kernel_size) for k, blk in zip(keep, masked.blocks))
    cfg = copy.deepcopy(masked.config)
    cfg.dsc_specs = new_specs
    dense = build_model(cfg, seed=masked.metadata.get("seed", 0), with_head=masked.head is not None)
    prev = np.array([0])  # the single input channel
    for src, dst, k in zip(masked.blocks, dense.blocks, keep):
        if src.standard:
            dst.conv.w[...] = src.conv.w[np.ix_(k, prev)]
            dst.conv.b[...] = src.conv.b[k]
        else:
            dst.dw.w[...] = src.dw.w[prev]
            dst.dw.b[...] = src.dw.b[prev]
            dst.pw.w[...] = src.pw.w[np.ix_(k, prev)]
            dst.pw.b[...] = src.pw.b[k]
        dst.bn.gamma[...] = src.bn.gamma[k]
        dst.bn.beta[...] = src.bn.beta[k]
        dst.bn.running_mean[...] = src.bn.running_mean[k]
        dst.bn.running_var[...] = src.bn.running_var[k]
        dst.mask = None
        prev = k
    last = keep[-1]
    for src, dst in zip(masked.aspp, dense.aspp):
        dst.w[...] = src.w[:, last, :]
        dst.b[...] = src.b
    if masked.config.use_aspp:
        dense.final_conv.w[...] = masked.final_conv.w
    else:
        dense.final_conv.w[...] = masked.final_conv.w[:, last, :]
    dense.final_conv.b[...] = masked.final_conv.b
    if masked.head is not None:
        dense.head.conv1.w[...] = masked.head.conv1.w[:, last, :]
        dense.head.conv1.b[...] = masked.head.conv1.b
        dense.head.bn.gamma[...] = masked.head.bn.gamma
        dense.head.bn.beta[...] = masked.head.bn.beta
        dense.head.bn.running_mean[...] = masked.head.bn.running_mean
        dense.head.bn.running_var[...] = masked.head.bn.running_var
        dense.head.conv2.w[...] = masked.head.conv2.w
        dense.head.conv2.b[...] = masked.head.conv2.b
    dense.metadata = dict(masked.metadata, compacted=True)
    return dense


def finetune(model: TinyPPG, train_segments, val_segments, cfg: PruneConfig, progress=None):
    """Recover accuracy after pruning; shares the training loop."""
    cfg.validate()
    tcfg = TrainConfig(epochs=cfg.finetune_epochs, lr0=cfg.finetune_lr,
                       loss=cfg.finetune_loss, l1_gamma_weight=0.0)
    if cfg.finetune_epochs == 0:
        return model, []
    return train(model, train_segments, val_segments, tcfg, progress=progress)

"""Subject-independent splitting, the training loop, DICE evaluation and
embedding export.
"""

import copy
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, StateError, TrainingDiverged
from .losses import LossConfig, MemoryBank, bank_update, sample_anchors, total_loss, bce_loss, scatter_embedding_grads
from .optim import Adam


@dataclass
class SplitSpec:
    train_subject_ids: tuple
    test_subject_ids: tuple
    val_fraction: float = 0.10
    seed: int = 0

    def validate(self):
        overlap = set(self.train_subject_ids) & set(self.test_subject_ids)
        if overlap:
            raise ConfigError(f"subjects {sorted(overlap)} appear in both train and test sets")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError(f"val_fraction must be in [0, 1), got {self.val_fraction}")


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr0: float = 0.0005
    epochs: int = 1000
    lr_halving_period: int = 100
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    l1_gamma_weight: float = 1e-4   # sparsity pressure on BN scales, for pruning
    checkpoint_period: int = 1      # epochs between validation checkpoints

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("initial learning rate must be positive")
        if self.epochs < 0 or self.lr_halving_period < 1 or self.checkpoint_period < 1:
            raise ConfigError("epochs, halving period and checkpoint period must be sane")
        if self.l1_gamma_weight < 0:
            raise ConfigError("l1_gamma_weight must be >= 0")
        self.loss.validate()


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def split_subjects(dataset, spec: SplitSpec):
    """Split segments by subject id; validation is drawn segment-wise
    (seeded) from the training portion. Returns (train, val, test)."""
    spec.validate()
    train_ids = set(spec.train_subject_ids)
    test_ids = set(spec.test_subject_ids)
    train_pool = [s for s in dataset if s.subject_id in train_ids]
    test = [s for s in dataset if s.subject_id in test_ids]
    n_val = int(math.floor(len(train_pool) * spec.val_fraction + 0.5))  # round half up
    rng = np.random.default_rng(spec.seed)
    val_idx = set(rng.choice(len(train_pool), size=n_val, replace=False).tolist()) if n_val else set()
    train = [s for i, s in enumerate(train_pool) if i not in val_idx]
    val = [train_pool[i] for i in sorted(val_idx)]
    return train, val, test


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Learning rate schedule: halved every cfg.lr_halving_period epochs."""
    return cfg.lr0 * 0.5 ** (epoch // cfg.lr_halving_period)


def dice(counts: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); defined as 1.0 when all three are zero."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    if denom == 0:
        return 1.0
    return 2.0 * counts.tp / denom


def _stack_batch(segments):
    x = np.stack([s.samples for s in segments]).astype(np.float32)
    y = np.stack([s.labels for s in segments]).astype(np.uint8)
    return x, y


def evaluate(model, segments, threshold: float = 0.5, batch_size: int = 64):
    """Pooled confusion counts over every sample point, the overall DICE,
    and per-segment DICE values (diagnostics only)."""
    if not segments:
        raise InputError("cannot evaluate on an empty segment list")
    counts = ConfusionCounts()
    per_segment = []
    for start in range(0, len(segments), batch_size):
        chunk = segments[start:start + batch_size]
        x, y = _stack_batch(chunk)
        probs = model.forward(x, training=False)
        pred = probs >= threshold
        truth = y == 1
        tp = (pred & truth).sum(axis=1)
        fp = (pred & ~truth).sum(axis=1)
        fn = (~pred & truth).sum(axis=1)
        tn = (~pred & ~truth).sum(axis=1)
        counts = counts + ConfusionCounts(int(tp.sum()), int(fp.sum()), int(fn.sum()), int(tn.sum()))
        for i in range(len(chunk)):
            per_segment.append(dice(ConfusionCounts(int(tp[i]), int(fp[i]), int(fn[i]), int(tn[i]))))
    return counts, dice(counts), per_segment


LOG_HEADER = ("epoch", "lr", "train_loss", "val_dice")


def write_log(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LOG_HEADER)
        writer.writerows(rows)


def train(model, train_segments, val_segments, cfg: TrainConfig, progress=None):
    """Train in place and return (model, log_rows).

    Per epoch: seeded shuffle, batches of cfg.batch_size, cross-entropy
    (+ contrastive term when enabled, + L1 on BN scales when
    l1_gamma_weight > 0), Adam updates under the halving schedule. The
    parameters with the best validation DICE are restored at the end.
    """
    cfg.validate()
    if not train_segments:
        raise InputError("no training segments")
    rng = np.random.default_rng(cfg.seed)
    optimizer = Adam(model.params())
    bank = MemoryBank(cfg.loss.bank_capacity) if (cfg.loss.bank_enabled and cfg.loss.active) else None
    contrastive = cfg.loss.active
    if contrastive and model.head is None:
        raise StateError("contrastive training requires a model built with the projection head")
    bns = model.block_bns()
    log_rows = []
    best = (-1.0, None)  # (val dice, param snapshot)
    n = len(train_segments)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x, y = _stack_batch([train_segments[i] for i in idx])
            model.zero_grads()
            if contrastive:
                probs, emb = model.forward_with_embeddings(x, training=True)
                anchors = sample_anchors(probs, y, emb, cfg.loss, rng)
                loss, dprobs, demb_anchor = total_loss(probs, y, anchors, cfg.loss, bank)
                if bank is not None:
                    bank_update(bank, anchors, cfg.loss, rng)
                demb = scatter_embedding_grads(demb_anchor, anchors, emb.shape) if demb_anchor is not None else None
            else:
                probs = model.forward(x, training=True)
                loss, dprobs = bce_loss(probs, y)
                demb = None
            if cfg.l1_gamma_weight > 0:
                loss += cfg.l1_gamma_weight * float(sum(np.abs(bn.gamma).sum() for bn in bns))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {n_batches}")
            model.backward(dprobs, demb)
            if cfg.l1_gamma_weight > 0:
                for bn in bns:
                    bn.ggamma += cfg.l1_gamma_weight * np.sign(bn.gamma)
            optimizer.step(lr)
            epoch_loss += loss
            n_batches += 1
        train_loss = epoch_loss / max(n_batches, 1)
        val_dice = float("nan")
        if val_segments and (epoch % cfg.checkpoint_period == 0 or epoch == cfg.epochs - 1):
            _, val_dice, _ = evaluate(model, val_segments)
            if val_dice > best[0]:
                best = (val_dice, [(name, v.copy()) for name, v, _ in model.params()])
        log_rows.append((epoch, lr, train_loss, val_dice))
        if progress is not None:
            progress(epoch, lr, train_loss, val_dice)
    if best[1] is not None:
        for (_, value, _), (_, snapshot) in zip(model.params(), best[1]):
            value[...] = snapshot
    return model, log_rows


def export_embeddings(model, segments, out_path, max_points: int = 1000, seed: int = 0):
    """Write sampled per-point embeddings as CSV for offline visualization.

    Columns: subject_id, segment_index, position, label, e0..e{D-1}.
    Sampling over all (segment, position) pairs is seeded; rows are
    exactly min(max_points, total points).
    """
    if model.head is None:
        raise StateError("embedding export requires the projection head")
    if not segments:
        raise InputError("no segments to export embeddings from")
    L = segments[0].samples.shape[0]
    total = len(segments) * L
    rng = np.random.default_rng(seed)
    n_rows = min(max_points, total)
    flat = rng.choice(total, size=n_rows, replace=False)
    flat.sort()
    by_segment = {}
    for f in flat.tolist():
        by_segment.setdefault(f // L, []).append(f % L)
    dim = model.config.projection_dim
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["subject_id", "segment_index", "position", "label"]
                        + [f"e{i}" for i in range(dim)])
        for seg_idx in sorted(by_segment):
            seg = segments[seg_idx]
            x, _ = _stack_batch([seg])
            _, emb = model.forward_with_embeddings(x, training=False)
            for pos in by_segment[seg_idx]:
                row = [seg.subject_id, seg.segment_index, pos, int(seg.labels[pos])]
                row += [f"{v:.7g}" for v in emb[0, pos]]
                writer.writerow(row)
    return n_rows

"""Training objective: per-point cross-entropy plus a temperature-scaled
contrastive term over sampled anchor embeddings, with an optional FIFO
memory bank supplying extra positives/negatives from earlier batches.
"""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

STRATEGIES = ("both", "artifact_only", "clean_only", "off")

# CLI spellings for the sampling strategies
_STRATEGY_ALIASES = {"artifact": "artifact_only", "clean": "clean_only"}

PROB_EPS = 1e-7


@dataclass
class LossConfig:
    lam: float = 0.1           # weight of the contrastive term in the total loss
    tau: float = 0.1           # softmax temperature
    strategy: str = "both"
    bank_enabled: bool = False
    bank_capacity: int = 1000  # per class
    bank_insert_per_batch: int = 50
    anchors_per_batch: int = 200

    def __post_init__(self):
        self.strategy = _STRATEGY_ALIASES.get(self.strategy, self.strategy)

    def validate(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if self.lam < 0:
            raise ConfigError(f"contrastive weight must be >= 0, got {self.lam}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}, expected one of {STRATEGIES}")
        if self.bank_capacity < 0 or self.bank_insert_per_batch < 0:
            raise ConfigError("bank sizes must be >= 0")
        if self.anchors_per_batch < 4 or self.anchors_per_batch % 4 != 0:
            raise ConfigError("anchors_per_batch must be a positive multiple of 4")

    @property
    def active(self):
        return self.strategy != "off" and self.lam > 0


def bce_loss(probs: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy over every sample point in the batch.

    probs and labels are (N, L). Probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs. Returns (loss, dloss/dprobs).
    """
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = labels.astype(p.dtype)
    m = p.size
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / m)
    grad = (p - y) / (p * (1.0 - p)) / m
    return loss, grad


# hardness codes stored in AnchorSet
EASY, HARD_FALSE_ALARM, HARD_MISS, FILL = 0, 1, 2, 3


@dataclass
class AnchorSet:
    """Sampled points of one mini-batch: embeddings with labels and hardness.

    positions[:, 0] is the segment index inside the batch and
    positions[:, 1] the sample position, so gradients can be scattered
    back into the (N, L, D) embedding tensor.
    """
    embeddings: np.ndarray  # (A, D)
    labels: np.ndarray      # (A,) uint8
    hardness: np.ndarray    # (A,) int8 codes
    positions: np.ndarray   # (A, 2) int

    def __len__(self):
        return self.labels.shape[0]


def anchor_eligible(labels: np.ndarray, strategy: str) -> np.ndarray:
    """Which sampled points may play the anchor role under a strategy.

    Restricting the strategy narrows the anchor role only; every sampled
    point still serves as positive/negative for the eligible anchors.
    """
    if strategy == "both":
        return np.ones(labels.shape[0], dtype=bool)
    if strategy == "artifact_only":
        return labels == 1
    if strategy == "clean_only":
        return labels == 0
    return np.zeros(labels.shape[0], dtype=bool)


def sample_anchors(probs, labels, embeddings, cfg: LossConfig, rng) -> AnchorSet:
    """Pick cfg.anchors_per_batch points across the whole mini-batch.

    Half the quota goes to easy points (correctly predicted at the 0.5
    threshold); the hard half splits evenly between clean points predicted
    as artifact and artifact points predicted as clean. Short quotas are
    topped up by uniform sampling over the batch.
    """
    if probs.shape[0] == 0:
        raise InputError("cannot sample anchors from an empty batch")
    total = cfg.anchors_per_batch
    n_easy = total // 2
    n_each_hard = total // 4
    flat_labels = labels.reshape(-1).astype(np.uint8)
    pred = (probs.reshape(-1) >= 0.5)
    is_artifact = flat_labels == 1
    correct = pred == is_artifact
    pools = [
        (np.flatnonzero(correct), n_easy, EASY),
        (np.flatnonzero(~correct & ~is_artifact), n_each_hard, HARD_FALSE_ALARM),
        (np.flatnonzero(~correct & is_artifact), n_each_hard, HARD_MISS),
    ]
    chosen = []
    codes = []
    for pool, quota, code in pools:
        take = min(quota, pool.shape[0])
        if take:
            picked = rng.choice(pool, size=take, replace=False)
            chosen.append(picked)
            codes.append(np.full(take, code, dtype=np.int8))
    chosen_idx = np.concatenate(chosen) if chosen else np.empty(0, dtype=np.int64)
    shortfall = total - chosen_idx.shape[0]
    if shortfall > 0:
        remaining = np.setdiff1d(np.arange(flat_labels.shape[0]), chosen_idx, assume_unique=False)
        if remaining.shape[0] >= shortfall:
            fill = rng.choice(remaining, size=shortfall, replace=False)
        else:
            fill = rng.choice(flat_labels.shape[0], size=shortfall, replace=True)
        chosen_idx = np.concatenate([chosen_idx, fill])
        codes.append(np.full(shortfall, FILL, dtype=np.int8))
    hardness = np.concatenate(codes) if codes else np.empty(0, dtype=np.int8)
    L = labels.shape[1]
    positions = np.stack([chosen_idx // L, chosen_idx % L], axis=1)
    emb = embeddings.reshape(-1, embeddings.shape[2])[chosen_idx]
    return AnchorSet(embeddings=np.ascontiguousarray(emb),
                     labels=flat_labels[chosen_idx],
                     hardness=hardness,
                     positions=positions)


class MemoryBank:
    """Two FIFO queues (artifact / clean) of detached embeddings.

    Entries only ever serve as positives/negatives for later batches,
    never as anchors; each entry carries a monotonically increasing id so
    tests can check that property.
    """

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._queues = {0: deque(maxlen=capacity), 1: deque(maxlen=capacity)}
        self._next_id = 0

    def __len__(self):
        return len(self._queues[0]) + len(self._queues[1])

    def size(self, label: int) -> int:
        return len(self._queues[int(label)])

    def insert(self, embeddings, labels):
        """Append copies; the oldest entries fall off beyond capacity."""
        ids = []
        for vec, lab in zip(embeddings, labels):
            self._queues[int(lab)].append((self._next_id, np.array(vec, copy=True)))
            ids.append(self._next_id)
            self._next_id += 1
        return ids

    def vectors(self, label: int) -> np.ndarray:
        q = self._queues[int(label)]
        if not q:
            return np.empty((0, 0), dtype=np.float32)
        return np.stack([vec for _, vec in q])

    def ids(self, label: int | None = None) -> list:
        if label is None:
            return [i for q in self._queues.values() for i, _ in q]
        return [i for i, _ in self._queues[int(label)]]


def bank_update(bank: MemoryBank, anchor_set: AnchorSet, cfg: LossConfig, rng):
    """Randomly move cfg.bank_insert_per_batch anchor embeddings into the bank."""
    n = min(cfg.bank_insert_per_batch, len(anchor_set))
    if n == 0:
        return []
    picked = rng.choice(len(anchor_set), size=n, replace=False)
    return bank.insert(anchor_set.embeddings[picked], anchor_set.labels[picked])


def contrastive_loss(anchor_set: AnchorSet, cfg: LossConfig, bank: MemoryBank | None = None):
    """Temperature-scaled contrastive loss over an anchor set.

    Per eligible anchor i with positives P and negatives N, each positive
    contributes -log(exp(s_ip/tau) / (exp(s_ip/tau) + sum_n exp(s_in/tau)));
    the anchor's loss is the mean over its positives and the total is the
    mean over anchors that have at least one positive. Similarities are
    inner products of the stored embeddings. Gradients flow to the in-batch
    anchor-set embeddings only; bank entries are frozen history.

    Returns (loss, dloss/dembeddings with shape of anchor_set.embeddings).
    """
    cfg.validate()
    emb = anchor_set.embeddings
    labels = anchor_set.labels
    A = emb.shape[0]
    grads = np.zeros_like(emb)
    if A == 0:
        return 0.0, grads
    eligible = np.flatnonzero(anchor_eligible(labels, cfg.strategy))
    if eligible.size == 0:
        return 0.0, grads
    tau = cfg.tau
    use_bank = bank is not None and cfg.bank_enabled
    bank_vecs = {}
    if use_bank:
        for lab in (0, 1):
            v = bank.vectors(lab)
            bank_vecs[lab] = v if v.size else None
    total = 0.0
    contributing = 0
    pending = []  # (anchor idx, grad_a, pos_idx, gpos_coef, neg_idx, gneg_coef)
    for a in eligible:
        lab = int(labels[a])
        same = np.flatnonzero(labels == lab)
        same = same[same != a]
        diff = np.flatnonzero(labels != lab)
        pos_list = [emb[same]] if same.size else []
        neg_list = [emb[diff]] if diff.size else []
        n_in_pos = same.size
        n_in_neg = diff.size
        if use_bank:
            bv_same = bank_vecs.get(lab)
            bv_diff = bank_vecs.get(1 - lab)
            if bv_same is not None:
                pos_list.append(bv_same)
            if bv_diff is not None:
                neg_list.append(bv_diff)
        if not pos_list:
            continue
        P = np.concatenate(pos_list) if len(pos_list) > 1 else pos_list[0]
        n_pos = P.shape[0]
        e_a = emb[a]
        z_p = P @ e_a / tau
        if neg_list:
            Nm = np.concatenate(neg_list) if len(neg_list) > 1 else neg_list[0]
            z_n = Nm @ e_a / tau
            m = max(z_p.max(), z_n.max())
            exp_n = np.exp(z_n - m)
            s_neg = exp_n.sum()
        else:
            Nm = None
            m = z_p.max()
            exp_n = None
            s_neg = 0.0
        exp_p = np.exp(z_p - m)
        denom = exp_p + s_neg
        total += float((-(z_p - m) + np.log(denom)).mean())
        contributing += 1
        # gradient pieces, all scaled by 1 / (|P| * tau) here and by
        # 1 / contributing at the end
        sigma = exp_p / denom               # per positive
        coef_p = (sigma - 1.0) / (n_pos * tau)
        ga = coef_p @ P
        if Nm is not None:
            t_sum = (1.0 / denom).sum()
            coef_n = exp_n * t_sum / (n_pos * tau)
            ga = ga + coef_n @ Nm
            gneg_coef = coef_n[:n_in_neg]
        else:
            gneg_coef = None
        pending.append((a, ga, same, coef_p[:n_in_pos], diff, gneg_coef))
    if contributing == 0:
        return 0.0, grads
    inv = 1.0 / contributing
    for a, ga, pos_idx, gpos_coef, neg_idx, gneg_coef in pending:
        grads[a] += inv * ga
        if pos_idx.size:
            np.add.at(grads, pos_idx, inv * gpos_coef[:, None] * emb[a])
        if gneg_coef is not None and neg_idx.size:
            np.add.at(grads, neg_idx, inv * gneg_coef[:, None] * emb[a])
    return total * inv, grads


def total_loss(probs, labels, anchor_set: AnchorSet | None, cfg: LossConfig,
               bank: MemoryBank | None = None):
    """Cross-entropy plus lam * contrastive.

    Returns (loss, dloss/dprobs, dloss/danchor_embeddings or None). With
    lam == 0 or strategy "off" this reduces exactly to the cross-entropy.
    """
    ce, dprobs = bce_loss(probs, labels)
    if not cfg.active or anchor_set is None:
        return ce, dprobs, None
    con, dembed = contrastive_loss(anchor_set, cfg, bank)
    return ce + cfg.lam * con, dprobs, cfg.lam * dembed


def scatter_embedding_grads(demb_anchor, anchor_set: AnchorSet, batch_shape):
    """Expand anchor-level gradients to the full (N, L, D) embedding tensor."""
    n, L, d = batch_shape
    full = np.zeros((n, L, d), dtype=demb_anchor.dtype)
    np.add.at(full, (anchor_set.positions[:, 0], anchor_set.positions[:, 1]), demb_anchor)
    return full

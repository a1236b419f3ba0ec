"""Momentum-contrast pretraining and the hybrid reconstruction+contrast loss.

Two models of identical structure run side by side: the query model trains by
backpropagation while the key model follows it through an exponential moving
average. Each step feeds two independently augmented views of every cloud;
the query view's CLS feature is pulled toward its key-view counterpart and
pushed from a FIFO queue of past key features via an InfoNCE loss.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .errors import ConfigError, InputError
from .geometry import AugmentConfig, PointCloud, augment, patchify
from .mae import DEFAULT_MASK_RATIO, StepResult, make_mask, mae_reconstruction_loss
from .model import PointTransformer, clone_model
from .optim import AdamW, LRPolicy, lr_at
from .seeding import derive_seed

DEFAULT_TEMPERATURE = 0.07
DEFAULT_MOMENTUM = 0.999
DEFAULT_QUEUE_CAPACITY = 4096
DEFAULT_HYBRID_WEIGHT = 1e-2


@dataclass
class MomentumPair:
    query_model: PointTransformer
    key_model: PointTransformer
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum {self.momentum} outside [0, 1]")
        q_names = self.query_model.registry.names()
        if q_names != self.key_model.registry.names():
            raise ConfigError("query and key models have different parameter sets")
        # the key model is never touched by an optimizer
        self.key_model.registry.set_trainable(False)

    @classmethod
    def from_model(cls, model: PointTransformer, momentum=DEFAULT_MOMENTUM):
        return cls(query_model=model, key_model=clone_model(model), momentum=momentum)


def momentum_update(pair: MomentumPair):
    """key <- m*key + (1-m)*query, parameter by parameter."""
    m = pair.momentum
    for name, key_param in pair.key_model.registry.items():
        query_param = pair.query_model.registry[name]
        if m == 0.0:
            key_param.data = query_param.data.copy()
        elif m != 1.0:
            key_param.data = m * key_param.data + (1.0 - m) * query_param.data


class NegativeQueue:
    """Ring buffer of unit-norm key features with strict FIFO eviction."""

    def __init__(self, dim: int, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ConfigError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._buffer = np.zeros((capacity, dim))
        self._cursor = 0
        self._size = 0

    def __len__(self):
        return self._size

    def enqueue(self, vectors):
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise InputError("queue entries must be unit-norm")
        for row in vectors:
            self._buffer[self._cursor] = row
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def vectors(self):
        """Stored vectors, oldest first; shape (len, dim)."""
        if self._size < self.capacity:
            return self._buffer[: self._size].copy()
        return np.roll(self._buffer, -self._cursor, axis=0).copy()


def contrastive_loss(q, k_pos, queue: NegativeQueue, temperature=DEFAULT_TEMPERATURE):
    """InfoNCE over logits [q.k_pos, q.k_1, ...]/tau with the positive first.

    ``q`` is a (B, dim) tensor of unit-norm query features (in the graph);
    ``k_pos`` is a matching constant array. An empty queue degenerates to a
    zero loss: the warmup state, not an error.
    """
    k_pos = np.asarray(k_pos, dtype=np.float64)
    positive = tt.tsum(q * k_pos, axis=1, keepdims=True)  # (B, 1)
    negatives = queue.vectors()
    if negatives.shape[0] > 0:
        neg_logits = tt.matmul(q, tt.tensor(negatives.T))  # (B, Q)
        logits = tt.concat([positive, neg_logits], axis=1)
    else:
        logits = positive
    log_probs = tt.log_softmax_rows(logits * (1.0 / temperature))
    return -tt.tmean(log_probs[:, 0])


def _cls_feature(model, patches_batch):
    groups = np.stack([p.groups for p in patches_batch])
    centers = np.stack([p.centers for p in patches_batch])
    tokens = model.embed_patches(groups)
    positions = model.positional_encoding(centers)
    encoded = model.encode(tokens, positions)
    return encoded.features[:, 0, :]


def _normalize_rows(feats):
    norms = tt.tsum(feats * feats, axis=1, keepdims=True) ** 0.5
    return feats / norms


def _two_views(cloud, aug_spec, seed):
    view_q = augment(cloud, aug_spec, derive_seed(seed, 0))
    view_k = augment(cloud, aug_spec, derive_seed(seed, 1))
    return view_q, view_k


def moco_step(pair: MomentumPair, queue: NegativeQueue, batch, aug_spec: AugmentConfig,
              seeds, temperature=DEFAULT_TEMPERATURE) -> StepResult:
    """One contrastive step: loss + backward, momentum update, then enqueue."""
    config = pair.query_model.config
    q_patches, k_patches = [], []
    for cloud, seed in zip(batch, seeds):
        view_q, view_k = _two_views(cloud, aug_spec, seed)
        q_patches.append(patchify(view_q, config.num_patches, config.group_size,
                                  derive_seed(seed, 2)))
        k_patches.append(patchify(view_k, config.num_patches, config.group_size,
                                  derive_seed(seed, 3)))
    q_feat = _normalize_rows(_cls_feature(pair.query_model, q_patches))
    with tt.no_grad():
        k_feat = _normalize_rows(_cls_feature(pair.key_model, k_patches)).data
    loss = contrastive_loss(q_feat, k_feat, queue, temperature)
    loss.backward()
    momentum_update(pair)
    queue.enqueue(k_feat)
    return StepResult(loss=loss.item(), extras={"l_con": loss.item()})


def hybrid_step(pair: MomentumPair, queue: NegativeQueue, batch, aug_spec: AugmentConfig,
                seeds, contrast_weight=DEFAULT_HYBRID_WEIGHT, ratio=DEFAULT_MASK_RATIO,
                temperature=DEFAULT_TEMPERATURE) -> StepResult:
    """Masked reconstruction on the query view plus a weighted contrastive term.

    The query CLS feature comes from the same masked encoder pass that drives
    reconstruction; the key feature sees the full second view. With a zero
    weight the contrastive term never enters the graph, so gradients equal a
    pure reconstruction step bit for bit.
    """
    config = pair.query_model.config
    q_patches, k_patches, plans = [], [], []
    for cloud, seed in zip(batch, seeds):
        view_q, view_k = _two_views(cloud, aug_spec, seed)
        q_patches.append(patchify(view_q, config.num_patches, config.group_size,
                                  derive_seed(seed, 2)))
        k_patches.append(patchify(view_k, config.num_patches, config.group_size,
                                  derive_seed(seed, 3)))
        plans.append(make_mask(config.num_patches, ratio, derive_seed(seed, 4)))
    l_rec, encoded = mae_reconstruction_loss(pair.query_model, q_patches, plans)
    q_feat = _normalize_rows(encoded.features[:, 0, :])
    with tt.no_grad():
        k_feat = _normalize_rows(_cls_feature(pair.key_model, k_patches)).data
    l_con = contrastive_loss(q_feat, k_feat, queue, temperature)
    if contrast_weight != 0.0:
        total = l_rec + contrast_weight * l_con
    else:
        total = l_rec
    total.backward()
    momentum_update(pair)
    queue.enqueue(k_feat)
    rec, con = l_rec.item(), l_con.item()
    return StepResult(
        loss=total.item(),
        extras={"l_rec": rec, "l_con": con,
                "ratio_rec_to_weighted_con": rec / (contrast_weight * con)
                if contrast_weight and con else float("inf")},
    )


@dataclass
class ContrastHistory:
    step_rows: list  # (epoch, step, l_rec, l_con, loss)


def train_contrastive(pair: MomentumPair, dataset, epochs, policy: LRPolicy,
                      aug_spec: AugmentConfig | None = None, hybrid=False,
                      contrast_weight=DEFAULT_HYBRID_WEIGHT, ratio=DEFAULT_MASK_RATIO,
                      temperature=DEFAULT_TEMPERATURE, queue: NegativeQueue | None = None,
                      seed=0, batch_size=16, out_dir=None) -> ContrastHistory:
    """MoCo (or hybrid) pretraining loop over the dataset's training split."""
    if aug_spec is None:
        aug_spec = AugmentConfig(scale=True, rotate_axes="z", dropout=0.25,
                                 noise_sigma=0.005)
    if queue is None:
        queue = NegativeQueue(pair.query_model.config.dim)
    optimizer = AdamW(pair.query_model.registry)
    rng = np.random.default_rng(derive_seed(seed, 11))
    rows = []
    global_step = 0
    train_indices = np.array(dataset.train_indices)
    for epoch in range(epochs):
        order = rng.permutation(len(train_indices))
        for start in range(0, len(order), batch_size):
            chunk = train_indices[order[start:start + batch_size]]
            clouds = [dataset.clouds[i] for i in chunk]
            seeds = [derive_seed(seed, 13, epoch, int(i)) for i in chunk]
            optimizer.zero_grad()
            if hybrid:
                result = hybrid_step(pair, queue, clouds, aug_spec, seeds,
                                     contrast_weight=contrast_weight, ratio=ratio,
                                     temperature=temperature)
            else:
                result = moco_step(pair, queue, clouds, aug_spec, seeds,
                                   temperature=temperature)
            optimizer.step(lr_at(policy, global_step), policy.weight_decay)
            rows.append((
                epoch, global_step,
                result.extras.get("l_rec", 0.0),
                result.extras.get("l_con", result.loss),
                result.loss,
            ))
            global_step += 1
    if out_dir is not None:
        write_contrast_csv(Path(out_dir) / "loss.csv", rows)
    return ContrastHistory(step_rows=rows)


def write_contrast_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "l_rec", "l_con", "loss"])
        for epoch, step, l_rec, l_con, loss in rows:
            writer.writerow([epoch, step, repr(float(l_rec)), repr(float(l_con)),
                             repr(float(loss))])

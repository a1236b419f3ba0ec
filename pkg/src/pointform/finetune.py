"""Supervised finetuning with a staged unfreezing schedule.

The backbone stays frozen (flags off, gradients still flow) while the
classification head trains; at the unfreeze epoch the backbone's trainable
flags switch on and the optimizer picks its parameters up with fresh moments.
The LR schedule runs uninterrupted across the switch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tt
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError
from .geometry import AugmentConfig, augment, patchify
from .mae import train_mae
from .optim import (  # noqa: F401  (re-exported module surface)
    AdamW,
    LRPolicy,
    finetune_policy,
    lr_at,
    pretrain_policy,
)
from .seeding import derive_seed

FINETUNE_BATCH_SIZE = 32
PRETRAIN_BATCH_SIZE = 128


@dataclass
class UnfreezeSchedule:
    unfreeze_epoch: int
    total_epochs: int
    adapt_epochs: int = 0  # optional domain-adaptation pretraining beforehand

    def validate(self):
        if not 0 <= self.unfreeze_epoch <= self.total_epochs:
            raise ConfigError(
                f"unfreeze epoch {self.unfreeze_epoch} outside [0, {self.total_epochs}]"
            )
        if self.adapt_epochs < 0:
            raise ConfigError("adapt epochs cannot be negative")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood; labels is an int array of shape (B,)."""
    log_probs = tt.log_softmax_rows(logits)
    picked = log_probs[np.arange(len(labels)), np.asarray(labels)]
    return -tt.tmean(picked)


def _batch_arrays(model, dataset, indices, cache, aug_spec=None, epoch=0, seed=0):
    groups, centers, labels = [], [], []
    for idx in indices:
        cloud = dataset.clouds[idx]
        if aug_spec is not None:
            cloud = augment(cloud, aug_spec, derive_seed(seed, 41, epoch, int(idx)))
            patches = patchify(cloud, model.config.num_patches,
                               model.config.group_size,
                               derive_seed(seed, 42, epoch, int(idx)))
        else:
            if idx not in cache:
                cache[idx] = patchify(cloud, model.config.num_patches,
                                      model.config.group_size,
                                      derive_seed(dataset.seed, 43, int(idx)))
            patches = cache[idx]
        groups.append(patches.groups)
        centers.append(patches.centers)
        labels.append(dataset.labels[idx])
    return np.stack(groups), np.stack(centers), np.array(labels, dtype=np.int64)


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray   # (C, C), rows normalized by class sample count
    per_class_counts: np.ndarray


def evaluate(model, dataset, indices=None, batch_size=32, voting_rounds=0,
             voting_seed=0) -> EvalResult:
    """Accuracy and a row-normalized confusion matrix over a split.

    ``voting_rounds`` > 0 averages logits over that many anisotropic-scale
    augmentations per sample.
    """
    if indices is None:
        indices = dataset.val_indices
    classes = dataset.num_classes
    hits = np.zeros((classes, classes), dtype=np.int64)
    cache = {}
    with tt.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = [int(i) for i in indices[start:start + batch_size]]
            if voting_rounds > 0:
                logit_sum = None
                for r in range(voting_rounds):
                    spec = AugmentConfig(scale=True)
                    groups, centers, labels = _batch_arrays(
                        model, dataset, chunk, {}, aug_spec=spec,
                        epoch=r, seed=voting_seed,
                    )
                    logits = model.forward_logits(groups, centers).data
                    logit_sum = logits if logit_sum is None else logit_sum + logits
                predictions = logit_sum.argmax(axis=1)
            else:
                groups, centers, labels = _batch_arrays(model, dataset, chunk, cache)
                predictions = model.forward_logits(groups, centers).data.argmax(axis=1)
            for truth, hit in zip(labels, predictions):
                hits[truth, hit] += 1
    counts = hits.sum(axis=1)
    confusion = np.zeros_like(hits, dtype=np.float64)
    nonzero = counts > 0
    confusion[nonzero] = hits[nonzero] / counts[nonzero, None]
    accuracy = float(np.trace(hits)) / max(int(counts.sum()), 1)
    return EvalResult(accuracy=accuracy, confusion=confusion, per_class_counts=counts)


@dataclass
class FinetuneResult:
    model: object
    rows: list            # (epoch, lr, train_loss, train_acc, val_acc, frozen)
    best_val_accuracy: float
    final_val_accuracy: float
    best_epoch: int


def finetune_run(source, dataset, schedule: UnfreezeSchedule, policy: LRPolicy,
                 seed: int = 0, batch_size: int = FINETUNE_BATCH_SIZE,
                 aug_spec: AugmentConfig | None = None, out_dir=None,
                 checkpoint_every: int = 0) -> FinetuneResult:
    """Train the head for ``unfreeze_epoch`` epochs, then everything jointly.

    ``source`` is a model instance or a checkpoint path. The default training
    augmentation is anisotropic scaling; pass an explicit identity spec to
    disable it.
    """
    schedule.validate()
    if isinstance(source, (str, Path)):
        model, _ = load_checkpoint(source, seed=seed)
    else:
        model = source
    if model.config.num_classes != dataset.num_classes:
        raise ConfigError(
            f"model has {model.config.num_classes} classes, dataset {dataset.num_classes}"
        )
    if aug_spec is None:
        aug_spec = AugmentConfig(scale=True)
    frozen_phase = schedule.unfreeze_epoch > 0
    model.set_backbone_trainable(not frozen_phase)
    model.registry.set_trainable(True, "head.")

    optimizer = AdamW(model.registry)
    rng = np.random.default_rng(derive_seed(seed, 21))
    cache = {}
    rows = []
    best_val, best_epoch = -1.0, -1
    global_step = 0
    train_indices = np.array(dataset.train_indices)
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(schedule.total_epochs):
        if frozen_phase and epoch >= schedule.unfreeze_epoch:
            model.set_backbone_trainable(True)
            frozen_phase = False
        order = rng.permutation(len(train_indices))
        epoch_loss, epoch_hits, epoch_total = 0.0, 0, 0
        lr = lr_at(policy, global_step)
        for start in range(0, len(order), batch_size):
            chunk = train_indices[order[start:start + batch_size]]
            use_aug = None if _is_identity(aug_spec) else aug_spec
            groups, centers, labels = _batch_arrays(
                model, dataset, chunk, cache, aug_spec=use_aug, epoch=epoch, seed=seed
            )
            optimizer.zero_grad()
            logits = model.forward_logits(groups, centers)
            loss = cross_entropy(logits, labels)
            loss.backward()
            lr = lr_at(policy, global_step)
            optimizer.step(lr, policy.weight_decay)
            global_step += 1
            epoch_loss += loss.item() * len(chunk)
            epoch_hits += int((logits.data.argmax(axis=1) == labels).sum())
            epoch_total += len(chunk)
        val = evaluate(model, dataset, batch_size=batch_size)
        rows.append((
            epoch, lr, epoch_loss / epoch_total, epoch_hits / epoch_total,
            val.accuracy, int(frozen_phase),
        ))
        if val.accuracy > best_val:
            best_val, best_epoch = val.accuracy, epoch
            if out_dir is not None:
                save_checkpoint(out_dir / "best.pfck", model, step=global_step,
                                seed_state=seed)
        if out_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch{epoch + 1}.pfck", model,
                            step=global_step, seed_state=seed)

    final_val = rows[-1][4] if rows else 0.0
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", rows)
        save_checkpoint(out_dir / "final.pfck", model, step=global_step, seed_state=seed)
    return FinetuneResult(model=model, rows=rows, best_val_accuracy=best_val,
                          final_val_accuracy=final_val, best_epoch=best_epoch)


def _is_identity(spec: AugmentConfig) -> bool:
    return (not spec.scale and spec.noise_sigma == 0.0 and not spec.rotate_axes
            and spec.dropout == 0.0 and spec.subsample is None)


def domain_adapt_pretrain(source, dataset, epochs: int, seed: int = 0,
                          batch_size: int = 16, out_dir=None):
    """Continue masked-patch pretraining on a new data distribution.

    Zero epochs is the identity; otherwise runs the reconstruction loop and
    returns (model, history).
    """
    if isinstance(source, (str, Path)):
        model, _ = load_checkpoint(source, seed=seed)
    else:
        model = source
    if epochs == 0:
        return model, None
    steps_per_epoch = max(1, -(-len(dataset.train_indices) // batch_size))
    policy = pretrain_policy(
        total_epochs=epochs, steps_per_epoch=steps_per_epoch,
        warmup_epochs=min(10, max(1, epochs // 4)),
    )
    history = train_mae(model, dataset, epochs=epochs, policy=policy, seed=seed,
                        batch_size=batch_size, out_dir=out_dir)
    return model, history


def write_metrics_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "train_acc", "val_acc", "frozen"])
        for epoch, lr, tl, ta, va, frozen in rows:
            writer.writerow([epoch, repr(float(lr)), repr(float(tl)),
                             repr(float(ta)), repr(float(va)), frozen])


def write_confusion_csv(path, result: EvalResult, class_names=None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    classes = result.confusion.shape[0]
    names = list(class_names) if class_names else [str(i) for i in range(classes)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class"] + names)
        for i in range(classes):
            writer.writerow([names[i]] + [repr(float(v)) for v in result.confusion[i]])

"""Masked-autoencoding pretraining.

Each cloud is patched into N groups; a random 60% (by default) of the groups
are hidden, the encoder sees only the visible ones, and the decoder predicts
the hidden groups' points in center-relative coordinates. The loss is the
patch-wise symmetric squared Chamfer distance, averaged over masked patches
and then samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .errors import ConfigError, InputError
from .geometry import PatchSet, PointCloud, chamfer, patchify
from .optim import AdamW, LRPolicy, lr_at
from .seeding import derive_seed

DEFAULT_MASK_RATIO = 0.6


@dataclass
class MaskPlan:
    ratio: float
    visible: np.ndarray  # sorted indices of visible patches
    masked: np.ndarray   # sorted indices of masked patches
    seed: int


def make_mask(n: int, ratio: float, seed: int) -> MaskPlan:
    """Uniform random mask over ``n`` patches; masked count is round(ratio*n)
    with half-up rounding. At least one patch must stay visible."""
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1)")
    count = int(math.floor(ratio * n + 0.5))
    if count >= n:
        raise ConfigError(f"mask ratio {ratio} leaves no visible patch of {n}")
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.choice(n, size=count, replace=False))
    visible = np.setdiff1d(np.arange(n), masked)
    return MaskPlan(ratio=ratio, visible=visible, masked=masked, seed=seed)


def _pairwise_sqdist(pred, target):
    """Squared distances between all point pairs inside each group.

    Fused op: forward keeps the (B, M, K, K, 3) difference array for a cheap
    backward instead of rebuilding it from three elementwise nodes.
    """
    pred = pred if isinstance(pred, tt.Tensor) else tt.tensor(pred)
    target = target if isinstance(target, tt.Tensor) else tt.tensor(target)
    diff = pred.data[:, :, :, None, :] - target.data[:, :, None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    pred_live, target_live = pred.in_graph(), target.in_graph()

    def vjp(g):
        gd = 2.0 * g[..., None] * diff
        gp = gd.sum(axis=3) if pred_live else None
        gt = -gd.sum(axis=2) if target_live else None
        return gp, gt

    return tt.custom(d2, (pred, target), vjp)


def chamfer_loss(pred, target):
    """Differentiable symmetric squared Chamfer over (B, M, K, 3) groups."""
    d2 = _pairwise_sqdist(pred, target)  # (B, M, K, K)
    return tt.tmean(tt.tmin(d2, axis=3)) + tt.tmean(tt.tmin(d2, axis=2))


def _as_patches(item, config, seed):
    if isinstance(item, PatchSet):
        return item
    if isinstance(item, PointCloud):
        return patchify(item, config.num_patches, config.group_size, seed)
    raise InputError(f"expected PointCloud or PatchSet, got {type(item).__name__}")


def _stack_masked_batch(model, batch, plans, patch_seeds=None):
    """Split each sample by its plan and stack into batched arrays."""
    vis_groups, vis_centers, masked_centers, target_groups = [], [], [], []
    for i, (item, plan) in enumerate(zip(batch, plans)):
        seed = plan.seed if patch_seeds is None else patch_seeds[i]
        patches = _as_patches(item, model.config, seed)
        vis_groups.append(patches.groups[plan.visible])
        vis_centers.append(patches.centers[plan.visible])
        masked_centers.append(patches.centers[plan.masked])
        target_groups.append(patches.groups[plan.masked])
    return (
        np.stack(vis_groups),
        np.stack(vis_centers),
        np.stack(masked_centers),
        np.stack(target_groups),
    )


@dataclass
class StepResult:
    loss: float
    extras: dict = field(default_factory=dict)


def mae_reconstruction_loss(model, batch, plans, patch_seeds=None):
    """Forward pass only; returns (loss tensor, encode result)."""
    vis_groups, vis_centers, masked_centers, targets = _stack_masked_batch(
        model, batch, plans, patch_seeds
    )
    tokens = model.embed_patches(vis_groups)
    vis_pos = model.positional_encoding(vis_centers)
    masked_pos = model.positional_encoding(masked_centers)
    encoded = model.encode(tokens, vis_pos)
    pred = model.decode_masked(encoded.features[:, 1:, :], vis_pos, masked_pos)
    return chamfer_loss(pred, tt.tensor(targets)), encoded


def mae_step(model, batch, plans, patch_seeds=None) -> StepResult:
    """One training step: loss, then backward into trainable parameters."""
    loss, _ = mae_reconstruction_loss(model, batch, plans, patch_seeds)
    loss.backward()
    return StepResult(loss=loss.item())


@dataclass
class ReconstructionResult:
    visible_points: np.ndarray        # absolute coordinates of visible groups
    reconstructed_points: np.ndarray  # absolute coordinates of predicted groups
    masked_truth_points: np.ndarray
    chamfer_to_truth: float
    plan: MaskPlan


def reconstruct_at_ratio(model, pc: PointCloud, ratio: float, seed: int) -> ReconstructionResult:
    """Inference-time reconstruction at an arbitrary masking ratio."""
    patches = patchify(pc, model.config.num_patches, model.config.group_size, seed)
    n = patches.num_patches
    if int(math.floor(ratio * n + 0.5)) == 0:
        raise InputError(f"ratio {ratio} masks nothing; nothing to reconstruct")
    plan = make_mask(n, ratio, seed)
    with tt.no_grad():
        vis_groups, vis_centers, masked_centers, _ = _stack_masked_batch(
            model, [patches], [plan]
        )
        tokens = model.embed_patches(vis_groups)
        vis_pos = model.positional_encoding(vis_centers)
        masked_pos = model.positional_encoding(masked_centers)
        encoded = model.encode(tokens, vis_pos)
        pred = model.decode_masked(encoded.features[:, 1:, :], vis_pos, masked_pos)
    absolute = patches.absolute_groups()
    visible_pts = absolute[plan.visible].reshape(-1, 3)
    recon_pts = (pred.data[0] + masked_centers[0][:, None, :]).reshape(-1, 3)
    truth_pts = absolute[plan.masked].reshape(-1, 3)
    return ReconstructionResult(
        visible_points=visible_pts,
        reconstructed_points=recon_pts,
        masked_truth_points=truth_pts,
        chamfer_to_truth=chamfer(recon_pts, truth_pts),
        plan=plan,
    )


@dataclass
class TrainHistory:
    step_losses: list          # (epoch, step, loss)
    val_losses: list           # (epoch, mean val loss)
    initial_val_loss: float
    final_val_loss: float


def _dataset_patches(model, dataset, indices, cache):
    out = []
    for idx in indices:
        if idx not in cache:
            cloud = dataset.clouds[idx]
            cache[idx] = patchify(
                cloud, model.config.num_patches, model.config.group_size,
                seed=derive_seed(dataset.seed, 101, idx),
            )
        out.append(cache[idx])
    return out


def validation_loss(model, dataset, ratio, cache, batch_size=16):
    """Mean masked-reconstruction loss over the validation split.

    Mask seeds depend only on the sample index, so numbers are comparable
    across epochs.
    """
    indices = dataset.val_indices
    total, count = 0.0, 0
    with tt.no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            patches = _dataset_patches(model, dataset, chunk, cache)
            plans = [
                make_mask(model.config.num_patches, ratio, derive_seed(dataset.seed, 202, i))
                for i in chunk
            ]
            loss, _ = mae_reconstruction_loss(model, patches, plans)
            total += loss.item() * len(chunk)
            count += len(chunk)
    return total / max(count, 1)


def train_mae(model, dataset, epochs, policy: LRPolicy, ratio=DEFAULT_MASK_RATIO,
              seed=0, batch_size=16, out_dir=None, log_every=1) -> TrainHistory:
    """MAE pretraining loop; writes loss.csv / val.csv when out_dir is given."""
    optimizer = AdamW(model.registry)
    rng = np.random.default_rng(derive_seed(seed, 1))
    cache = {}
    step_rows, val_rows = [], []

    initial_val = validation_loss(model, dataset, ratio, cache)
    val_rows.append((0, initial_val))

    global_step = 0
    train_indices = np.array(dataset.train_indices)
    for epoch in range(epochs):
        order = rng.permutation(len(train_indices))
        for start in range(0, len(order), batch_size):
            chunk = train_indices[order[start:start + batch_size]]
            patches = _dataset_patches(model, dataset, chunk, cache)
            plans = [
                make_mask(model.config.num_patches, ratio,
                          derive_seed(seed, 303, epoch, int(i)))
                for i in chunk
            ]
            optimizer.zero_grad()
            result = mae_step(model, patches, plans)
            optimizer.step(lr_at(policy, global_step), policy.weight_decay)
            if global_step % log_every == 0:
                step_rows.append((epoch, global_step, result.loss))
            global_step += 1
        val_rows.append((epoch + 1, validation_loss(model, dataset, ratio, cache)))

    history = TrainHistory(
        step_losses=step_rows,
        val_losses=val_rows,
        initial_val_loss=initial_val,
        final_val_loss=val_rows[-1][1],
    )
    if out_dir is not None:
        write_loss_csv(Path(out_dir) / "loss.csv", step_rows)
        write_val_csv(Path(out_dir) / "val.csv", val_rows)
    return history


def write_loss_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss"])
        for epoch, step, loss in rows:
            writer.writerow([epoch, step, repr(float(loss))])


def write_val_csv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "val_loss"])
        for epoch, loss in rows:
            writer.writerow([epoch, repr(float(loss))])

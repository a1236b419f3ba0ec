"""AdamW with decoupled weight decay and a warmup + cosine LR policy.

The learning rate updates every optimizer step: linear from the initial rate
to the peak across the warmup epochs, then cosine annealing to zero at the
final step. Finetuning defaults to a 5e-4 peak, pretraining to 1e-3; both
share the 1e-6 initial rate, 10 warmup epochs, and 0.05 weight decay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import ParamRegistry

FINETUNE_PEAK_LR = 5e-4
PRETRAIN_PEAK_LR = 1e-3
INITIAL_LR = 1e-6
WARMUP_EPOCHS = 10
WEIGHT_DECAY = 0.05


@dataclass
class LRPolicy:
    peak: float
    total_epochs: int
    steps_per_epoch: int
    initial: float = INITIAL_LR
    warmup_epochs: int = WARMUP_EPOCHS
    weight_decay: float = WEIGHT_DECAY

    def validate(self):
        if self.peak <= 0 or self.initial < 0:
            raise ConfigError("learning rates must be positive")
        if self.warmup_epochs < 0 or self.total_epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("epoch/step counts out of range")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError(
                f"warmup {self.warmup_epochs} epochs exceeds total {self.total_epochs}"
            )

    @property
    def warmup_steps(self):
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self):
        return self.total_epochs * self.steps_per_epoch


def finetune_policy(total_epochs, steps_per_epoch, **overrides):
    return LRPolicy(peak=FINETUNE_PEAK_LR, total_epochs=total_epochs,
                    steps_per_epoch=steps_per_epoch, **overrides)


def pretrain_policy(total_epochs, steps_per_epoch, **overrides):
    return LRPolicy(peak=PRETRAIN_PEAK_LR, total_epochs=total_epochs,
                    steps_per_epoch=steps_per_epoch, **overrides)


def lr_at(policy: LRPolicy, step: int) -> float:
    """Learning rate at a global step; pure function of (policy, step)."""
    policy.validate()
    warm = policy.warmup_steps
    total = policy.total_steps
    if step < warm:
        return policy.initial + (policy.peak - policy.initial) * step / warm
    if total == warm:
        return policy.peak
    progress = (step - warm) / (total - warm)
    progress = min(max(progress, 0.0), 1.0)
    return policy.peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def _decay_exempt(name: str) -> bool:
    """Norm scales and biases are excluded from weight decay."""
    return name.endswith((".bias", ".gamma", ".beta"))


class AdamW:
    """Decoupled-weight-decay Adam over a registry's trainable parameters.

    Moment buffers (and the per-parameter step used for bias correction) are
    created the first time a parameter is updated, so parameters unfrozen
    mid-run enter with zeroed state.
    """

    def __init__(self, registry: ParamRegistry, beta1=0.9, beta2=0.999, eps=1e-8):
        self.registry = registry
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._state = {}

    def step(self, lr: float, weight_decay: float = 0.0):
        """One update over every trainable parameter that has a gradient."""
        for name, param in self.registry.trainable_items():
            grad = param.grad
            if grad is None:
                continue
            state = self._state.get(name)
            if state is None:
                state = {"m": np.zeros_like(param.data), "v": np.zeros_like(param.data), "t": 0}
                self._state[name] = state
            state["t"] += 1
            t = state["t"]
            state["m"] = self.beta1 * state["m"] + (1.0 - self.beta1) * grad
            state["v"] = self.beta2 * state["v"] + (1.0 - self.beta2) * grad * grad
            m_hat = state["m"] / (1.0 - self.beta1 ** t)
            v_hat = state["v"] / (1.0 - self.beta2 ** t)
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if weight_decay and not _decay_exempt(name):
                update = update + weight_decay * param.data
            param.data = param.data - lr * update

    def zero_grad(self):
        self.registry.zero_grad()

    def tracked_parameter_names(self):
        return sorted(self._state.keys())

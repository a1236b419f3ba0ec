"""Transformer backbone for patch-token point clouds.

A model owns a :class:`ParamRegistry` of named float64 parameters and builds a
fresh autodiff graph per forward call. The encoder prepends a learned CLS
token, runs pre-norm blocks, and can capture every post-softmax attention
matrix; the decoder reconstructs masked patches from a shared mask token.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tt
from .errors import ConfigError, InputError, ShapeError
from .tensor import Tensor


@dataclass
class ModelConfig:
    blocks: int = 4
    heads: int = 6
    dim: int = 96
    decoder_blocks: int = 2
    mlp_ratio: int = 4
    num_patches: int = 64
    group_size: int = 32
    num_classes: int = 8
    embed_hidden: int = 64  # pointwise MLP width inside the patch embedder

    def validate(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        # blocks/decoder_blocks may be 0: a depth-0 stack is the identity and
        # is exercised directly by the truncation tooling.
        for name in ("heads", "dim", "mlp_ratio", "num_patches", "group_size",
                     "num_classes", "embed_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.blocks < 0 or self.decoder_blocks < 0:
            raise ConfigError("block counts cannot be negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        cfg = cls(**d)
        cfg.validate()
        return cfg


class ParamRegistry:
    """Ordered name -> parameter map with per-name trainable flags."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        self._trainable[name] = True
        return t

    def __contains__(self, name):
        return name in self._params

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def is_trainable(self, name) -> bool:
        return self._trainable[name]

    def set_trainable(self, flag: bool, prefix: str = ""):
        """Toggle the trainable flag for every name under ``prefix``."""
        for name in self._params:
            if name.startswith(prefix):
                self._trainable[name] = bool(flag)

    def trainable_items(self):
        return [(n, t) for n, t in self._params.items() if self._trainable[n]]

    def trainable_count(self):
        return sum(t.size for _, t in self.trainable_items())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_arrays(self):
        """Ordered (name, float64 array) snapshot."""
        return [(n, t.data.copy()) for n, t in self._params.items()]

    def load_arrays(self, named_arrays):
        for name, arr in named_arrays:
            if name not in self._params:
                raise ConfigError(f"unknown parameter {name!r} in state")
            param = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != param.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {param.shape}")
            param.data = arr.copy()


@dataclass
class AttentionRecord:
    """Post-softmax attention matrices captured during one forward pass.

    ``layers[l]`` has shape (B, heads, T, T) over the CLS+patch token sequence;
    ``token_centers[t]`` maps token position to patch index (-1 for CLS).
    """

    layers: list
    token_centers: np.ndarray

    @property
    def depth(self):
        return len(self.layers)


@dataclass
class EncodeResult:
    features: Tensor                 # (B, 1+N, dim)
    attention: AttentionRecord | None
    block_outputs: list | None       # per-block (B, 1+N, dim) tensors


def _trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) resampled until inside two standard deviations."""
    out = rng.standard_normal(shape)
    for _ in range(8):
        bad = np.abs(out) > 2.0
        if not bad.any():
            break
        out[bad] = rng.standard_normal(int(bad.sum()))
    return np.clip(out, -2.0, 2.0) * std


class Linear:
    def __init__(self, registry, name, fan_in, fan_out, rng):
        self.weight = registry.register(f"{name}.weight", _trunc_normal(rng, (fan_in, fan_out)))
        self.bias = registry.register(f"{name}.bias", np.zeros(fan_out))

    def __call__(self, x):
        return tt.linear(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, registry, name, dim):
        self.gamma = registry.register(f"{name}.gamma", np.ones(dim))
        self.beta = registry.register(f"{name}.beta", np.zeros(dim))

    def __call__(self, x):
        return tt.layernorm(x, self.gamma, self.beta)


class Mlp:
    def __init__(self, registry, name, dim, hidden, rng):
        self.fc1 = Linear(registry, f"{name}.fc1", dim, hidden, rng)
        self.fc2 = Linear(registry, f"{name}.fc2", hidden, dim, rng)

    def __call__(self, x):
        return self.fc2(tt.gelu(self.fc1(x)))


class Attention:
    def __init__(self, registry, name, dim, heads, rng):
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.q = Linear(registry, f"{name}.q", dim, dim, rng)
        self.k = Linear(registry, f"{name}.k", dim, dim, rng)
        self.v = Linear(registry, f"{name}.v", dim, dim, rng)
        self.proj = Linear(registry, f"{name}.proj", dim, dim, rng)

    def _split_heads(self, x, b, t):
        # (B, T, D) -> (B, H, T, D/H)
        return tt.transpose(tt.reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x, capture=None):
        b, t, d = x.shape
        q = self._split_heads(self.q(x), b, t)
        k = self._split_heads(self.k(x), b, t)
        v = self._split_heads(self.v(x), b, t)
        scores = tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))) * self.scale
        attn = tt.softmax_rows(scores)  # (B, H, T, T)
        if capture is not None:
            capture.append(attn.data.copy())
        out = tt.matmul(attn, v)
        out = tt.reshape(tt.transpose(out, (0, 2, 1, 3)), (b, t, d))
        return self.proj(out)


class Block:
    """Pre-norm transformer block: attention then MLP, each with a residual."""

    def __init__(self, registry, name, dim, heads, mlp_ratio, rng):
        self.norm1 = LayerNorm(registry, f"{name}.norm1", dim)
        self.attn = Attention(registry, f"{name}.attn", dim, heads, rng)
        self.norm2 = LayerNorm(registry, f"{name}.norm2", dim)
        self.mlp = Mlp(registry, f"{name}.mlp", dim, dim * mlp_ratio, rng)

    def __call__(self, x, capture=None):
        x = x + self.attn(self.norm1(x), capture=capture)
        return x + self.mlp(self.norm2(x))


class PointTransformer:
    """Patch embedder + positional encoder + encoder stack + decoder + head."""

    BACKBONE_PREFIXES = ("embed.", "pos.", "cls.", "enc.", "mask.", "dec.")

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.registry = ParamRegistry()
        rng = np.random.default_rng(seed)
        reg, dim = self.registry, config.dim

        hidden = config.embed_hidden
        self.embed_fc1 = Linear(reg, "embed.fc1", 3, hidden, rng)
        self.embed_fc2 = Linear(reg, "embed.fc2", hidden, hidden, rng)
        self.embed_proj = Linear(reg, "embed.proj", hidden, dim, rng)
        self.pos_fc1 = Linear(reg, "pos.fc1", 3, dim, rng)
        self.pos_fc2 = Linear(reg, "pos.fc2", dim, dim, rng)
        self.cls_token = reg.register("cls.token", _trunc_normal(rng, (1, 1, dim)))
        self.cls_pos = reg.register("cls.pos", _trunc_normal(rng, (1, 1, dim)))
        self.enc_blocks = [
            Block(reg, f"enc.block{i}", dim, config.heads, config.mlp_ratio, rng)
            for i in range(config.blocks)
        ]
        self.mask_token = reg.register("mask.token", _trunc_normal(rng, (1, 1, dim)))
        self.dec_blocks = [
            Block(reg, f"dec.block{i}", dim, config.heads, config.mlp_ratio, rng)
            for i in range(config.decoder_blocks)
        ]
        self.dec_norm = LayerNorm(reg, "dec.norm", dim)
        self.dec_head = Linear(reg, "dec.head", dim, config.group_size * 3, rng)
        self.head_norm = LayerNorm(reg, "head.norm", dim)
        self.head_fc1 = Linear(reg, "head.fc1", dim, dim, rng)
        self.head_fc2 = Linear(reg, "head.fc2", dim, dim // 2, rng)
        self.head_fc3 = Linear(reg, "head.fc3", dim // 2, config.num_classes, rng)

    # -- forward pieces -------------------------------------------------

    def embed_patches(self, groups) -> Tensor:
        """Shared pointwise MLP, max-pool over each group's points, project.

        ``groups``: (B, N, K, 3) center-relative coordinates.
        """
        groups = groups if isinstance(groups, Tensor) else Tensor(groups)
        if groups.ndim != 4 or groups.shape[-1] != 3:
            raise ConfigError(f"expected (B, N, K, 3) groups, got {groups.shape}")
        h = tt.gelu(self.embed_fc1(groups))
        h = self.embed_fc2(h)            # (B, N, K, dim)
        pooled = tt.tmax(h, axis=2)      # (B, N, dim), permutation-invariant
        return self.embed_proj(pooled)

    def positional_encoding(self, centers) -> Tensor:
        """Two-layer MLP from center coordinates (B, N, 3) to (B, N, dim)."""
        centers = centers if isinstance(centers, Tensor) else Tensor(centers)
        return self.pos_fc2(tt.gelu(self.pos_fc1(centers)))

    def encode(self, tokens, positions=None, capture=False, depth=None,
               keep_intermediates=False) -> EncodeResult:
        """Run the encoder over CLS + patch tokens.

        ``positions`` is added to ``tokens`` when given (pass None if the sum
        was formed by the caller). ``depth`` limits how many blocks run.
        """
        if positions is not None and positions.shape != tokens.shape:
            raise ShapeError(f"tokens {tokens.shape} vs positions {positions.shape}")
        x = tokens + positions if positions is not None else tokens
        b, n, _ = x.shape
        cls = tt.broadcast_to(self.cls_token + self.cls_pos, (b, 1, self.config.dim))
        x = tt.concat([cls, x], axis=1)
        run = self.enc_blocks if depth is None else self.enc_blocks[:depth]
        captured = [] if capture else None
        outputs = [] if keep_intermediates else None
        for block in run:
            per_block = [] if capture else None
            x = block(x, capture=per_block)
            if capture:
                captured.append(per_block[0])
            if keep_intermediates:
                outputs.append(x)
        record = None
        if capture:
            token_centers = np.concatenate([[-1], np.arange(n)])
            record = AttentionRecord(layers=captured, token_centers=token_centers)
        return EncodeResult(features=x, attention=record, block_outputs=outputs)

    def decode_masked(self, visible_features, visible_positions, masked_positions) -> Tensor:
        """Reconstruct masked groups as (B, M, K, 3) relative coordinates."""
        m = masked_positions.shape[1]
        if m == 0:
            raise InputError("nothing to reconstruct: zero masked patches")
        b = visible_features.shape[0]
        mask_tokens = tt.broadcast_to(self.mask_token, (b, m, self.config.dim))
        x = tt.concat(
            [visible_features + visible_positions, mask_tokens + masked_positions], axis=1
        )
        for block in self.dec_blocks:
            x = block(x)
        x = self.dec_norm(x)
        masked = x[:, -m:, :]
        flat = self.dec_head(masked)  # (B, M, K*3)
        return tt.reshape(flat, (b, m, self.config.group_size, 3))

    def classify(self, features) -> Tensor:
        """Logits from the CLS feature of the final retained block."""
        cls_feat = features[:, 0, :]
        h = self.head_norm(cls_feat)
        h = tt.gelu(self.head_fc1(h))
        h = tt.gelu(self.head_fc2(h))
        return self.head_fc3(h)

    def forward_logits(self, groups, centers, depth=None) -> Tensor:
        tokens = self.embed_patches(groups)
        positions = self.positional_encoding(centers)
        encoded = self.encode(tokens, positions, depth=depth)
        return self.classify(encoded.features)

    # -- registry helpers -------------------------------------------------

    def set_backbone_trainable(self, flag: bool):
        for prefix in self.BACKBONE_PREFIXES:
            self.registry.set_trainable(flag, prefix)

    def backbone_param_count(self):
        return sum(
            t.size for n, t in self.registry.items()
            if n.startswith(self.BACKBONE_PREFIXES)
        )

    def copy_params_from(self, other: "PointTransformer"):
        self.registry.load_arrays(other.registry.state_arrays())


class TruncatedModel:
    """View over a model that stops after ``keep`` encoder blocks.

    Shares the underlying registry; nothing is copied or re-registered.
    """

    def __init__(self, base: PointTransformer, keep: int):
        if not 0 <= keep <= base.config.blocks:
            raise ConfigError(f"cannot keep {keep} of {base.config.blocks} blocks")
        self.base = base
        self.keep = keep

    @property
    def config(self):
        return self.base.config

    @property
    def registry(self):
        return self.base.registry

    def embed_patches(self, groups):
        return self.base.embed_patches(groups)

    def positional_encoding(self, centers):
        return self.base.positional_encoding(centers)

    def encode(self, tokens, positions=None, capture=False, depth=None,
               keep_intermediates=False):
        depth = self.keep if depth is None else min(depth, self.keep)
        return self.base.encode(tokens, positions, capture=capture, depth=depth,
                                keep_intermediates=keep_intermediates)

    def decode_masked(self, visible_features, visible_positions, masked_positions):
        return self.base.decode_masked(visible_features, visible_positions, masked_positions)

    def classify(self, features):
        return self.base.classify(features)

    def forward_logits(self, groups, centers, depth=None):
        tokens = self.embed_patches(groups)
        positions = self.positional_encoding(centers)
        encoded = self.encode(tokens, positions, depth=depth)
        return self.classify(encoded.features)

    def set_backbone_trainable(self, flag):
        self.base.set_backbone_trainable(flag)

    def backbone_param_count(self):
        return self.base.backbone_param_count()


def truncate_depth(model: PointTransformer, keep: int) -> TruncatedModel:
    """A forward view running only the first ``keep`` encoder blocks."""
    return TruncatedModel(model, keep)


def clone_model(model: PointTransformer, seed: int = 0) -> PointTransformer:
    """Fresh model of the same config with parameter values copied over."""
    twin = PointTransformer(model.config, seed=seed)
    twin.copy_params_from(model)
    return twin

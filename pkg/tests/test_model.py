import numpy as np
import pytest

import pointform.tensor as tt
from pointform.errors import ConfigError, InputError
from pointform.model import (
    ModelConfig,
    PointTransformer,
    clone_model,
    truncate_depth,
)
from conftest import assert_close, central_difference


def tiny_config(**overrides):
    base = dict(blocks=1, heads=2, dim=8, decoder_blocks=1, mlp_ratio=2,
                num_patches=2, group_size=4, num_classes=3, embed_hidden=8)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model():
    return PointTransformer(tiny_config(), seed=0)


def random_patches(rng, b, n, k):
    groups = rng.standard_normal((b, n, k, 3)) * 0.1
    centers = rng.standard_normal((b, n, 3))
    return groups, centers


# -- config -------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=10, heads=3).validate()
    with pytest.raises(ConfigError):
        ModelConfig(num_patches=0).validate()
    ModelConfig(blocks=0).validate()  # depth-0 stack allowed


def test_registry_order_and_flags(tiny_model):
    names = tiny_model.registry.names()
    assert names == sorted(names, key=names.index)  # stable order
    assert "enc.block0.attn.q.weight" in names
    tiny_model.registry.set_trainable(False, "enc.")
    assert not tiny_model.registry.is_trainable("enc.block0.attn.q.weight")
    assert tiny_model.registry.is_trainable("head.fc1.weight")


# -- embedder -----------------------------------------------------------------


def test_embed_permutation_invariance(tiny_model, rng):
    groups, _ = random_patches(rng, 1, 2, 4)
    out = tiny_model.embed_patches(groups).data
    perm = groups[:, :, [2, 0, 3, 1], :]
    out_perm = tiny_model.embed_patches(perm).data
    assert np.array_equal(out, out_perm)


def test_embed_zero_weights_gives_zero_tokens(rng):
    model = PointTransformer(tiny_config(), seed=0)
    for name, t in model.registry.items():
        if name.startswith("embed."):
            t.data = np.zeros_like(t.data)
    groups, _ = random_patches(rng, 1, 2, 4)
    assert np.array_equal(model.embed_patches(groups).data, np.zeros((1, 2, 8)))


def test_embed_gradient_vs_fd(rng):
    model = PointTransformer(tiny_config(), seed=1)
    groups, _ = random_patches(rng, 1, 2, 4)
    w = model.registry["embed.fc1.weight"]
    out = tt.tsum(model.embed_patches(groups))
    out.backward()

    def f(x):
        orig = w.data
        w.data = x
        with tt.no_grad():
            val = tt.tsum(model.embed_patches(groups)).item()
        w.data = orig
        return val

    assert_close(w.grad, central_difference(f, w.data.copy()), rtol=1e-4, atol=1e-8)


# -- positional encoding ---------------------------------------------------------


def test_positional_encoding_depends_only_on_centers(tiny_model, rng):
    centers = rng.standard_normal((1, 2, 3))
    a = tiny_model.positional_encoding(centers).data
    b = tiny_model.positional_encoding(centers.copy()).data
    assert np.array_equal(a, b)
    same_center = np.broadcast_to(centers[:, :1], (1, 2, 3)).copy()
    out = tiny_model.positional_encoding(same_center).data
    assert np.array_equal(out[0, 0], out[0, 1])


# -- encoder ----------------------------------------------------------------------


def test_encode_capture_rows_sum_to_one(tiny_model, rng):
    groups, centers = random_patches(rng, 2, 2, 4)
    tokens = tiny_model.embed_patches(groups)
    result = tiny_model.encode(tokens, tiny_model.positional_encoding(centers), capture=True)
    assert result.attention.depth == 1
    for layer in result.attention.layers:
        assert layer.shape == (2, 2, 3, 3)
        assert np.all(layer >= 0)
        assert_close(layer.sum(axis=-1), np.ones((2, 2, 3)), rtol=0, atol=1e-6)
    assert result.attention.token_centers.tolist() == [-1, 0, 1]


def test_encode_depth_zero_is_identity(rng):
    model = PointTransformer(tiny_config(blocks=0), seed=0)
    groups, centers = random_patches(rng, 1, 2, 4)
    tokens = model.embed_patches(groups)
    positions = model.positional_encoding(centers)
    result = model.encode(tokens, positions)
    expected = tokens.data + positions.data
    assert np.array_equal(result.features.data[:, 1:], expected)
    assert np.array_equal(
        result.features.data[:, 0], (model.cls_token.data + model.cls_pos.data)[0]
    )


def test_single_token_attention_is_one(rng):
    model = PointTransformer(tiny_config(num_patches=1), seed=0)
    groups = rng.standard_normal((1, 0, 4, 3))  # zero patches: CLS only
    tokens = tt.tensor(np.zeros((1, 0, 8)))
    result = model.encode(tokens, None, capture=True)
    for layer in result.attention.layers:
        assert layer.shape == (1, 2, 1, 1)
        assert np.allclose(layer, 1.0)


def test_capture_does_not_change_outputs(tiny_model, rng):
    groups, centers = random_patches(rng, 1, 2, 4)
    tokens = tiny_model.embed_patches(groups)
    positions = tiny_model.positional_encoding(centers)
    plain = tiny_model.encode(tokens, positions, capture=False).features.data
    captured = tiny_model.encode(tokens, positions, capture=True).features.data
    assert np.array_equal(plain, captured)


# -- decoder ----------------------------------------------------------------------


def test_decode_shape_contract(tiny_model, rng):
    for m in (1, 2, 3):
        vis = tt.tensor(rng.standard_normal((1, 2, 8)))
        vis_pos = tt.tensor(rng.standard_normal((1, 2, 8)))
        masked_pos = tt.tensor(rng.standard_normal((1, m, 8)))
        out = tiny_model.decode_masked(vis, vis_pos, masked_pos)
        assert out.shape == (1, m, 4, 3)


def test_decode_rejects_zero_masked(tiny_model, rng):
    vis = tt.tensor(rng.standard_normal((1, 2, 8)))
    with pytest.raises(InputError):
        tiny_model.decode_masked(vis, vis, tt.tensor(np.zeros((1, 0, 8))))


def test_mask_token_receives_gradient(tiny_model, rng):
    vis = tt.tensor(rng.standard_normal((1, 2, 8)))
    vis_pos = tt.tensor(rng.standard_normal((1, 2, 8)))
    masked_pos = tt.tensor(rng.standard_normal((1, 1, 8)))
    out = tiny_model.decode_masked(vis, vis_pos, masked_pos)
    tt.tsum(out * out).backward()
    grad = tiny_model.mask_token.grad
    assert grad is not None and np.any(grad != 0)


# -- classification head ------------------------------------------------------------


def test_classify_shapes_and_softmax(tiny_model, rng):
    groups, centers = random_patches(rng, 2, 2, 4)
    logits = tiny_model.forward_logits(groups, centers)
    assert logits.shape == (2, 3)
    probs = tt.softmax_rows(logits).data
    assert_close(probs.sum(axis=1), np.ones(2), rtol=0, atol=1e-9)


def test_untrained_model_is_roughly_uniform(rng):
    model = PointTransformer(tiny_config(num_classes=4), seed=0)
    probs = []
    for _ in range(100):
        groups, centers = random_patches(rng, 1, 2, 4)
        with tt.no_grad():
            logits = model.forward_logits(groups, centers)
            probs.append(tt.softmax_rows(logits).data[0])
    probs = np.array(probs)
    # small random init: every predicted distribution stays close to uniform
    assert np.abs(probs - 0.25).max() < 0.1
    assert np.abs(probs.mean(axis=0) - 0.25).max() < 0.05


# -- truncation -----------------------------------------------------------------------


def test_truncate_full_depth_is_bitwise_identical(rng):
    model = PointTransformer(tiny_config(blocks=3), seed=0)
    groups, centers = random_patches(rng, 1, 2, 4)
    full = model.forward_logits(groups, centers).data
    view = truncate_depth(model, 3)
    assert np.array_equal(view.forward_logits(groups, centers).data, full)


def test_truncate_zero_keeps_raw_cls(rng):
    model = PointTransformer(tiny_config(blocks=3), seed=0)
    groups, centers = random_patches(rng, 1, 2, 4)
    view = truncate_depth(model, 0)
    tokens = view.embed_patches(groups)
    positions = view.positional_encoding(centers)
    feats = view.encode(tokens, positions).features.data
    assert np.array_equal(feats[:, 0], (model.cls_token.data + model.cls_pos.data)[0])


def test_truncate_rejects_bad_keep(tiny_model):
    with pytest.raises(ConfigError):
        truncate_depth(tiny_model, 5)


def test_truncate_prefix_matches_full_model(rng):
    model = PointTransformer(tiny_config(blocks=3), seed=0)
    groups, centers = random_patches(rng, 1, 2, 4)
    tokens = model.embed_patches(groups)
    positions = model.positional_encoding(centers)
    full = model.encode(tokens, positions, keep_intermediates=True)
    view = truncate_depth(model, 2)
    part = view.encode(
        view.embed_patches(groups), view.positional_encoding(centers),
        keep_intermediates=True,
    )
    assert len(part.block_outputs) == 2
    for a, b in zip(part.block_outputs, full.block_outputs[:2]):
        assert np.array_equal(a.data, b.data)


# -- full-model gradient check ----------------------------------------------------------


def test_full_model_gradients_match_fd(rng):
    """Scalar MAE-style loss on a 2-patch dim-8 1-block model, every parameter."""
    model = PointTransformer(tiny_config(), seed=2)
    groups, centers = random_patches(rng, 1, 2, 4)

    def loss_value():
        tokens = model.embed_patches(groups[:, :1])
        vis_pos = model.positional_encoding(centers[:, :1])
        masked_pos = model.positional_encoding(centers[:, 1:])
        enc = model.encode(tokens, vis_pos)
        pred = model.decode_masked(enc.features[:, 1:, :], vis_pos, masked_pos)
        recon = tt.tmean((pred - tt.tensor(groups[:, 1:])) ** 2.0)
        logits = model.classify(enc.features)
        return recon + tt.tmean(logits * logits)

    model.registry.zero_grad()
    loss_value().backward()

    checked = 0
    for name, param in model.registry.items():
        grad = param.grad if param.grad is not None else np.zeros(param.shape)

        def f(x, param=param):
            orig = param.data
            param.data = x
            with tt.no_grad():
                val = loss_value().item()
            param.data = orig
            return val

        fd = central_difference(f, param.data.copy())
        assert_close(grad, fd, rtol=1e-4, atol=1e-7)
        checked += param.size
    assert checked > 1000


def test_clone_model_matches(rng):
    model = PointTransformer(tiny_config(), seed=3)
    twin = clone_model(model, seed=99)
    groups, centers = random_patches(rng, 1, 2, 4)
    assert np.array_equal(
        model.forward_logits(groups, centers).data,
        twin.forward_logits(groups, centers).data,
    )

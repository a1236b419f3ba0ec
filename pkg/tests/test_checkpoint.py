import json
import struct

import numpy as np
import pytest

import pointform.tensor as tt
from pointform.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from pointform.errors import FormatError
from pointform.model import ModelConfig, PointTransformer


def small_model(seed=0):
    cfg = ModelConfig(blocks=1, heads=2, dim=8, decoder_blocks=1, mlp_ratio=2,
                      num_patches=2, group_size=4, num_classes=3, embed_hidden=8)
    return PointTransformer(cfg, seed=seed)


def test_save_load_save_is_byte_identical(tmp_path):
    model = small_model()
    first = tmp_path / "a.pfck"
    second = tmp_path / "b.pfck"
    save_checkpoint(first, model, step=17, seed_state=5)
    loaded, meta = load_checkpoint(first)
    assert meta.step == 17 and meta.seed_state == 5
    save_checkpoint(second, loaded, step=meta.step, seed_state=meta.seed_state)
    assert first.read_bytes() == second.read_bytes()


def test_round_trip_preserves_params_to_f32(tmp_path, rng):
    model = small_model(seed=1)
    path = tmp_path / "m.pfck"
    save_checkpoint(path, model)
    loaded, _ = load_checkpoint(path)
    for name, t in model.registry.items():
        back = loaded.registry[name].data
        assert np.array_equal(back, t.data.astype("<f4").astype(np.float64))


def test_forward_after_reload_within_f32_tolerance(tmp_path, rng):
    model = small_model(seed=2)
    path = tmp_path / "m.pfck"
    save_checkpoint(path, model)
    loaded, _ = load_checkpoint(path)
    groups = rng.standard_normal((1, 2, 4, 3)) * 0.1
    centers = rng.standard_normal((1, 2, 3))
    with tt.no_grad():
        before = model.forward_logits(groups, centers).data
        after = loaded.forward_logits(groups, centers).data
    np.testing.assert_allclose(after, before, rtol=1e-6, atol=1e-7)


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.pfck"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_rejects_bad_version(tmp_path):
    model = small_model()
    path = tmp_path / "v.pfck"
    save_checkpoint(path, model)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_tampered_offset_table_is_a_format_error(tmp_path):
    model = small_model()
    path = tmp_path / "t.pfck"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + mlen])
    manifest["tensors"][-1]["offset"] = 10**9  # points past the payload
    blob = json.dumps(manifest, separators=(",", ":")).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + mlen:])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_overlapping_offsets_rejected(tmp_path):
    model = small_model()
    path = tmp_path / "o.pfck"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + mlen])
    manifest["tensors"][1]["offset"] = 0  # collides with tensor 0
    blob = json.dumps(manifest, separators=(",", ":")).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(blob)) + blob + raw[16 + mlen:])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_truncated_file_rejected(tmp_path):
    model = small_model()
    path = tmp_path / "short.pfck"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_magic_constant():
    assert MAGIC == b"PFCK"

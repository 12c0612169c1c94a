import numpy as np
import pytest

from nimaenh.autodiff import Tensor
from nimaenh.checkpoint import (
    CorruptCheckpointError,
    VersionMismatchError,
    config_hash,
    load_can,
    load_checkpoint,
    load_nima,
    save_can,
    save_checkpoint,
    save_nima,
)
from nimaenh.enhance import CanConfig, build_can
from nimaenh.quality import NimaConfig, build_tiny_nima


def test_save_load_save_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": Tensor(rng.normal(size=(3, 4))), "b": Tensor(rng.normal(size=7))}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, tensors, {"step": 5})
    loaded, meta = load_checkpoint(p1)
    assert meta["step"] == 5
    save_checkpoint(p2, {k: Tensor(v) for k, v in loaded.items()}, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_values_are_float32_exact(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.normal(size=10)
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"x": Tensor(data)}, {})
    loaded, _ = load_checkpoint(path)
    np.testing.assert_array_equal(loaded["x"], data.astype(np.float32).astype(np.float64))


def test_truncated_file_is_corruption_error(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"x": Tensor(np.ones(100))}, {})
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 37])
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path)


def test_wrong_magic_is_version_error(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"x": Tensor(np.ones(4))}, {})
    raw = bytearray(path.read_bytes())
    raw[:8] = b"BOGUS999"
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)


def test_flipped_payload_bit_detected(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"x": Tensor(np.ones(64))}, {})
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x40
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptCheckpointError, match="checksum"):
        load_checkpoint(path)


def test_nima_round_trip(tmp_path):
    model = build_tiny_nima(NimaConfig(channels=(4, 8)), seed=3)
    path = tmp_path / "nima.ckpt"
    save_nima(path, model, step=42)
    loaded = load_nima(path)
    assert loaded.config == model.config
    for name, tensor in loaded.parameters().items():
        want = model.parameters()[name].data.astype(np.float32).astype(np.float64)
        np.testing.assert_array_equal(tensor.data, want)
    # a second save of the loaded model reproduces the file exactly
    path2 = tmp_path / "nima2.ckpt"
    save_nima(path2, loaded, step=42)
    assert path.read_bytes() == path2.read_bytes()


def test_can_round_trip_preserves_schedule(tmp_path):
    cfg = CanConfig(depth=5, width=8, dilation_schedule=[1, 2, 8, 1, 1])
    model = build_can(cfg, seed=4)
    path = tmp_path / "can.ckpt"
    save_can(path, model, step=7, extra={"gamma": 1e-4})
    loaded = load_can(path)
    assert loaded.config.dilation_schedule == [1, 2, 8, 1, 1]
    assert [l.dilation for l in loaded.layers] == [1, 2, 8, 1, 1]
    path2 = tmp_path / "can2.ckpt"
    save_can(path2, loaded, step=7, extra={"gamma": 1e-4})
    assert path.read_bytes() == path2.read_bytes()


def test_wrong_model_kind_rejected(tmp_path):
    model = build_tiny_nima(NimaConfig(channels=(4,)), seed=0)
    path = tmp_path / "m.ckpt"
    save_nima(path, model)
    from nimaenh.checkpoint import CheckpointError

    with pytest.raises(CheckpointError):
        load_can(path)


def test_config_hash_stable_and_distinct():
    a = config_hash(CanConfig(depth=5, width=8))
    b = config_hash(CanConfig(depth=5, width=8))
    c = config_hash(CanConfig(depth=6, width=8))
    assert a == b
    assert a != c

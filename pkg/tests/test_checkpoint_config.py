import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from longidiff import checkpoint as ck
from longidiff.codec import encode
from longidiff.config import ConfigError, from_dict, load_config, same_except_label, save_config


def sample_ckpt():
    rng = np.random.default_rng(0)
    return ck.Checkpoint(
        "ab" * 32,
        1234,
        {"w": rng.standard_normal((3, 2)).astype(np.float32), "b": np.zeros(2, np.float32), "s": np.float32(1.5) * np.ones(())},
    )


def test_header_layout():
    raw = ck.to_bytes(sample_ckpt())
    assert raw[:8] == b"LDIFFCK\0"
    assert struct.unpack("<I", raw[8:12])[0] == 1
    assert raw[12:44] == bytes.fromhex("ab" * 32)
    assert struct.unpack("<QI", raw[44:56]) == (1234, 3)
    name_len = struct.unpack("<H", raw[56:58])[0]
    assert raw[58 : 58 + name_len] == b"w"
    assert raw[58 + name_len] == 2
    assert struct.unpack("<II", raw[59 + name_len : 67 + name_len]) == (3, 2)


def test_round_trip_bytes(tmp_path):
    raw = ck.to_bytes(sample_ckpt())
    back = ck.from_bytes(raw)
    assert back.step == 1234 and back.config_hash == "ab" * 32
    assert ck.to_bytes(back) == raw
    ck.save(tmp_path / "c.bin", back)
    again = ck.load(tmp_path / "c.bin", expect_hash="ab" * 32)
    ck.save(tmp_path / "d.bin", again)
    assert (tmp_path / "c.bin").read_bytes() == (tmp_path / "d.bin").read_bytes() == raw


def test_corrupt_and_mismatched(tmp_path):
    raw = ck.to_bytes(sample_ckpt())
    for bad in (raw[:-1], raw + b"\0", b"NOTACKPT" + raw[8:], raw[:8] + struct.pack("<I", 9) + raw[12:]):
        with pytest.raises(ck.CheckpointError):
            ck.from_bytes(bad)
    ck.save(tmp_path / "c.bin", sample_ckpt())
    with pytest.raises(ck.CheckpointError):
        ck.load(tmp_path / "c.bin", expect_hash="cd" * 32)


def test_split_state():
    params, m, v = ck.split_state({"a": np.zeros(1), "adam.m.a": np.ones(1), "adam.v.a": np.ones(1)})
    assert list(params) == ["a"] and list(m) == ["a"] and list(v) == ["a"]


names = st.text(st.characters(min_codepoint=48, max_codepoint=122), min_size=1, max_size=12)
tensors = st.dictionaries(names, arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=4)), max_size=5)


@settings(max_examples=100, deadline=None)
@given(tensors, st.integers(0, 2**63))
def test_round_trip_property(tens, step):
    raw = ck.to_bytes(ck.Checkpoint("0" * 64, step, tens))
    back = ck.from_bytes(raw)
    assert ck.to_bytes(back) == raw
    assert set(back.tensors) == set(tens)
    for k, a in tens.items():
        assert back.tensors[k].shape == a.shape
        assert back.tensors[k].tobytes() == a.tobytes()


def test_seed_is_mandatory():
    with pytest.raises(ConfigError):
        from_dict({})
    with pytest.raises(ConfigError):
        from_dict({"seed": "7"})


@pytest.mark.parametrize(
    "raw",
    [
        {"seed": 0, "frames": 0},
        {"seed": 0, "bogus": 1},
        {"seed": 0, "data": {"nope": 1}},
        {"seed": 0, "model": {"heads": 3}},
        {"seed": 0, "model": {"unknown": 1}},
        {"seed": 0, "model": {"frames": 4}},
        {"seed": 0, "beta_end": 1.5},
        {"seed": 0, "factor": 3},
        {"seed": 0, "latent_scale": 0},
    ],
)
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_json_round_trip_and_overrides(tmp_path):
    cfg = from_dict({"seed": 3, "data": {"n_train": 10}, "model": {"base_channels": 16}})
    save_config(cfg, tmp_path / "c.json")
    again = load_config(tmp_path / "c.json")
    assert again == cfg and again.hash() == cfg.hash()
    over = load_config(tmp_path / "c.json", {"data": {"n_val": 3}, "lr": 5e-4})
    assert over.data.n_train == 10 and over.data.n_val == 3 and over.lr == 5e-4
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_hash_scope():
    a = from_dict({"seed": 1})
    assert a.hash() == a.with_overrides(steps=10, run_dir="elsewhere").hash()
    assert a.hash() != a.with_overrides(lr=3e-4).hash()
    assert a.hash() != a.with_overrides(seed=2).hash()
    b = a.with_overrides(label_conditioning=False)
    assert a.hash() != b.hash() and same_except_label(a, b)
    assert not same_except_label(a, b.with_overrides(hidden_weight=2.0))


def test_derived_latent_shape():
    cfg = from_dict({"seed": 0, "data": {"image_size": 64, "channels": 3}})
    assert cfg.denoiser.latent_channels == 48 and cfg.denoiser.latent_size == 16
    frames = np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32)
    z = cfg.to_latent(frames)
    assert z.shape == (2, 48, 16, 16)
    np.testing.assert_allclose(cfg.from_latent(z), frames, atol=1e-6)
    assert json.loads(cfg.to_json())["data"]["channels"] == 3


def test_cosine_learning_rate():
    cfg = from_dict({"seed": 0, "lr": 1e-3, "lr_min": 1e-5, "lr_decay_steps": 100})
    assert cfg.lr_at(1) == 1e-3
    assert cfg.lr_at(51) == pytest.approx((1e-3 + 1e-5) / 2)
    assert cfg.lr_at(101) == cfg.lr_at(500) == pytest.approx(1e-5)
    rates = [cfg.lr_at(s) for s in range(1, 102)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert from_dict({"seed": 0, "lr": 3e-4}).lr_at(1000) == 3e-4
    with pytest.raises(ConfigError):
        from_dict({"seed": 0, "lr_decay_steps": -1})


def test_latent_normalisation():
    frames = np.tile(np.array([0.0, 0.25, 0.5, 1.0], dtype=np.float32), (1, 1, 16, 4))
    plain = from_dict({"seed": 0, "data": {"image_size": 16}})
    # default keeps raw codec values
    assert plain.to_latent(frames).tobytes() == encode(frames, 4).tobytes()
    scaled = from_dict({"seed": 0, "data": {"image_size": 16}, "latent_shift": 0.5, "latent_scale": 2.0})
    z = scaled.to_latent(frames)
    np.testing.assert_array_equal(np.sort(np.unique(z)), [-1.0, -0.5, 0.0, 1.0])
    np.testing.assert_array_equal(scaled.from_latent(z), frames)

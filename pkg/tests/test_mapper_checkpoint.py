import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prefixvqa import tensor as T
from prefixvqa.checkpoint import read_checkpoint, write_checkpoint
from prefixvqa.errors import CheckpointError, ConfigError, DimensionError
from prefixvqa.mapper import MapperConfig, init_mapper, load_mapper, map_features, save_mapper
from prefixvqa.tensor import Tensor, finite_diff_check

from conftest import randomize


def test_widths_for_large_embedding():
    assert MapperConfig(embed_dim=1600, prefix_len=8).widths == (512, 6400, 12800)


def test_small_mapper_parameter_count():
    assert init_mapper(MapperConfig(embed_dim=64, prefix_len=8)).parameter_count() == 262_912


def test_odd_width_rejected():
    with pytest.raises(ConfigError):
        init_mapper(MapperConfig(embed_dim=7, prefix_len=3))


def test_seeded_init_is_reproducible():
    a, b = (init_mapper(MapperConfig(embed_dim=16, seed=4)) for _ in range(2))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_output_shape_zero_weights_and_reshape():
    mapper = init_mapper(MapperConfig(embed_dim=16))
    feat = np.random.default_rng(0).normal(size=512)
    out = map_features(mapper, feat)
    assert out.shape == (8, 16)
    np.testing.assert_array_equal(out.data.reshape(-1), mapper.raw(Tensor(feat)).data)
    for p in mapper.params.values():
        p.data = np.zeros_like(p.data)
    np.testing.assert_array_equal(map_features(mapper, feat).data, np.zeros((8, 16)))


def test_wrong_feature_length():
    with pytest.raises(DimensionError):
        map_features(init_mapper(MapperConfig(embed_dim=16)), np.zeros(256))


def test_mapper_gradient_matches_finite_differences():
    mapper = init_mapper(MapperConfig(embed_dim=4, prefix_len=2))
    randomize(mapper.params, seed=1, scale=0.1)
    feat = Tensor(np.random.default_rng(2).uniform(-1, 1, 512))
    target = Tensor(np.random.default_rng(3).normal(size=(2, 4)))

    def loss(_):
        diff = T.add(mapper(feat), T.scale(target, -1.0))
        return T.mean(T.mul(diff, diff))

    for name in ("fc1.b", "fc2.w", "fc2.b"):
        assert finite_diff_check(loss, mapper.params[name]) < 1e-4


def test_mapper_round_trip(tmp_path):
    mapper = init_mapper(MapperConfig(embed_dim=8, prefix_len=4, seed=3))
    save_mapper(mapper, tmp_path / "m.plmc")
    loaded = load_mapper(tmp_path / "m.plmc")
    feat = np.random.default_rng(0).normal(size=512)
    np.testing.assert_array_equal(loaded(feat).data, mapper(feat).data)


# -- checkpoint container ---------------------------------------------------------

def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "c.plmc"
    write_checkpoint(path, {"kind": "x"}, {"w": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    cfg = b'{"kind": "x"}'
    expected = (b"PLMC" + struct.pack("<HI", 1, len(cfg)) + cfg + struct.pack("<H", 1) + b"w"
                + struct.pack("<BII", 2, 1, 2) + struct.pack("<2d", 1.0, 2.0))
    assert raw == expected


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       st.lists(st.integers(0, 4), min_size=0, max_size=3), max_size=4),
       st.integers(0, 2**32 - 1))
def test_checkpoint_round_trip(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {name: rng.normal(size=tuple(dims)) for name, dims in shapes.items()}
    path = tmp_path_factory.mktemp("ck") / "c.plmc"
    write_checkpoint(path, {"seed": seed}, tensors)
    config, loaded = read_checkpoint(path)
    assert config == {"seed": seed} and set(loaded) == set(tensors)
    for k, v in tensors.items():
        assert loaded[k].shape == v.shape
        np.testing.assert_array_equal(loaded[k], v)


def test_config_only_checkpoint(tmp_path):
    write_checkpoint(tmp_path / "c.plmc", {"kind": "adapter"}, {})
    assert read_checkpoint(tmp_path / "c.plmc") == ({"kind": "adapter"}, {})


@pytest.mark.parametrize("mangle", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<H", 9) + b[6:],
    lambda b: b[:-3],
    lambda b: b[:12],
])
def test_corrupt_checkpoints(tmp_path, mangle):
    path = tmp_path / "c.plmc"
    write_checkpoint(path, {"kind": "x"}, {"w": np.ones((3, 3))})
    path.write_bytes(mangle(path.read_bytes()))
    with pytest.raises(CheckpointError):
        read_checkpoint(path)

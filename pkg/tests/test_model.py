import json

import numpy as np
import pytest

from bidganet.errors import ConfigError, ShapeError
from bidganet.model import (FUSION_MODES, VERSIONS, NetworkConfig, SegModel, build_model,
                            count_params, load_checkpoint, param_breakdown,
                            read_checkpoint_config, save_checkpoint)
from bidganet.oracles import param_count_oracle
from bidganet.tensor import Tensor


@pytest.fixture(scope="module")
def light():
    return build_model(NetworkConfig(version="light", num_classes=3, seed=0))


@pytest.mark.parametrize("version", VERSIONS)
@pytest.mark.parametrize("mode", FUSION_MODES)
def test_param_count_matches_oracle(version, mode):
    cfg = NetworkConfig(version=version, fusion_mode=mode)
    assert count_params(SegModel(cfg)) == param_count_oracle(cfg)


def test_versions_strictly_increasing():
    counts = [count_params(SegModel(NetworkConfig(version=v))) for v in VERSIONS]
    assert counts[0] < counts[1] < counts[2]


def test_breakdown_sums_to_total(light):
    assert sum(param_breakdown(light).values()) == count_params(light)


@pytest.mark.parametrize("mode", FUSION_MODES)
def test_forward_shape_every_mode(mode):
    m = build_model(NetworkConfig(version="light", num_classes=4, fusion_mode=mode))
    assert m(Tensor(np.zeros((2, 3, 64, 96), np.float32))).shape == (2, 4, 64, 96)


def test_single_image_forward(light):
    light.eval()
    assert light(Tensor(np.zeros((3, 64, 64), np.float32))).shape == (3, 64, 64)


def test_indivisible_input_rejected(light):
    with pytest.raises(ShapeError):
        light(Tensor(np.zeros((1, 3, 48, 64), np.float32)))
    with pytest.raises(ShapeError):
        light(Tensor(np.zeros((1, 4, 64, 64), np.float32)))


def test_predict_dtype_and_range(light):
    pred = light.predict(np.random.default_rng(0).standard_normal((3, 64, 64)).astype(np.float32))
    assert pred.dtype == np.uint8 and pred.shape == (64, 64) and pred.max() < 3


def test_config_validation():
    with pytest.raises(ConfigError):
        NetworkConfig(version="huge")
    with pytest.raises(ConfigError):
        NetworkConfig(fusion_mode="sum")
    with pytest.raises(ConfigError):
        NetworkConfig.from_dict({"version": "light", "depth": 3})
    blocks = [list(b) for b in NetworkConfig().low_res_blocks]
    blocks[2][1] = 99
    with pytest.raises(ConfigError):
        NetworkConfig(low_res_blocks=blocks)


def test_version_case_insensitive():
    assert NetworkConfig(version="Large").version == "large"


def test_config_json_roundtrip():
    cfg = NetworkConfig(version="base", num_classes=11, fusion_mode="concat", seed=4)
    again = NetworkConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg


def test_checkpoint_roundtrip(tmp_path, light):
    path = tmp_path / "m.bdgn"
    save_checkpoint(light, path)
    back = load_checkpoint(path, expected=light.config)
    for (n1, a), (n2, b) in zip(light.named_tensors(), back.named_tensors()):
        assert n1 == n2
        np.testing.assert_array_equal(a.data, b.data)
    cfg, _ = read_checkpoint_config(path.read_bytes())
    assert cfg == light.config


def test_checkpoint_config_mismatch(tmp_path, light):
    path = tmp_path / "m.bdgn"
    save_checkpoint(light, path)
    with pytest.raises(ConfigError):
        load_checkpoint(path, expected=NetworkConfig(version="light", num_classes=4))


def test_checkpoint_corruption(tmp_path, light):
    path = tmp_path / "m.bdgn"
    save_checkpoint(light, path)
    raw = path.read_bytes()
    (tmp_path / "bad.bdgn").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "bad.bdgn")
    (tmp_path / "long.bdgn").write_bytes(raw + b"\0")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "long.bdgn")


def test_checkpoint_dtype_option(tmp_path, light):
    path = tmp_path / "m.bdgn"
    save_checkpoint(light, path)
    assert load_checkpoint(path, dtype=np.float64).dtype == np.float64


def test_same_seed_same_weights():
    a = build_model(NetworkConfig(version="light", seed=3))
    b = build_model(NetworkConfig(version="light", seed=3))
    for (_, x), (_, y) in zip(a.named_tensors(), b.named_tensors()):
        np.testing.assert_array_equal(x.data, y.data)

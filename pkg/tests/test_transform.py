import numpy as np
import pytest

from freqcodec import tensor as T
from freqcodec.model import FrequencyCodec
from freqcodec.tensor import Tensor
from freqcodec.transform import (
    AnalysisTransform,
    FrequencyPyramid,
    HyperEncoder,
    ModelConfig,
    SpatialSampler,
    average_pool_conv,
)

from conftest import gradcheck

LINEAR = ModelConfig(linear=True, base_channels=8, latent_channels=8, hyper_channels=4)


def test_spatial_sample_shapes():
    rng = np.random.default_rng(0)
    sampler = SpatialSampler(ModelConfig(base_channels=8), rng)
    assert sampler(Tensor(np.zeros((1, 3, 256, 256), np.float32))).shape == (1, 8, 64, 64)
    assert sampler(Tensor(np.zeros((1, 3, 64, 64), np.float32))).shape == (1, 8, 16, 16)


def test_spatial_sample_rejects_indivisible_with_hint():
    sampler = SpatialSampler(ModelConfig(base_channels=8), np.random.default_rng(0))
    with pytest.raises(ValueError, match="pad to 68x64"):
        sampler(Tensor(np.zeros((1, 3, 66, 64), np.float32)))


def test_linear_sampler_keeps_constants():
    sampler = SpatialSampler(LINEAR, np.random.default_rng(0))
    out = sampler(Tensor(np.full((1, 3, 32, 32), 0.3))).data
    np.testing.assert_allclose(out, 0.3, atol=1e-12)


def test_decompose_shapes():
    an = AnalysisTransform(ModelConfig(base_channels=8, latent_channels=8), np.random.default_rng(0))
    bands = an.decompose(Tensor(np.zeros((1, 8, 64, 64), np.float32)))
    assert {k: v.shape[2:] for k, v in bands.items()} == {
        "high": (16, 16), "mid": (32, 32), "low": (64, 64)
    }


@pytest.mark.parametrize("seed", range(10))
def test_linear_pyramid_telescopes(seed):
    pyr = FrequencyPyramid(LINEAR, np.random.default_rng(0))
    feat = np.random.default_rng(seed).normal(size=(1, 8, 16, 16)).astype(np.float32)
    high, mid, low = pyr(Tensor(feat))
    down = average_pool_conv(8)(Tensor(feat))
    assert np.max(np.abs((low + T.bilinear_upsample2x(mid)).data - feat)) <= 1e-5
    assert np.max(np.abs((mid + T.bilinear_upsample2x(high)).data - down.data)) <= 1e-5


def test_shared_downsample_is_evaluated_once():
    pyr = FrequencyPyramid(ModelConfig(base_channels=8), np.random.default_rng(0))
    calls = []
    first = pyr.down[0]
    original = first.forward

    def counting(x):
        calls.append(1)
        return original(x)

    first.forward = counting
    pyr(Tensor(np.zeros((1, 8, 16, 16), np.float32)))
    assert len(calls) == 1


def test_every_split_sees_every_input_pixel():
    an = AnalysisTransform(ModelConfig(base_channels=8, latent_channels=8), np.random.default_rng(3))
    feat = np.random.default_rng(0).normal(size=(1, 8, 16, 16)).astype(np.float32)
    base = {k: v.data for k, v in an.decompose(Tensor(feat)).items()}
    feat[0, 2, 5, 9] += 1.0
    probe = an.decompose(Tensor(feat))
    changed = [k for k in base if not np.array_equal(base[k], probe[k].data)]
    assert sorted(changed) == ["high", "low", "mid"]


def test_hyper_encoder_shape_and_zero_weights():
    cfg = ModelConfig(base_channels=8, latent_channels=12, hyper_channels=6)
    enc = HyperEncoder(cfg, np.random.default_rng(0))
    y = Tensor(np.random.default_rng(1).normal(size=(1, 12, 16, 16)).astype(np.float32))
    assert enc(y).shape == (1, 6, 4, 4)
    for p in enc.parameters():
        p.data[...] = 0
    assert np.all(enc(y).data == 0)


@pytest.mark.parametrize("seed", range(3))
def test_hyper_encoder_gradient_reaches_y(seed):
    cfg = ModelConfig(base_channels=8, latent_channels=4, hyper_channels=2)
    enc = HyperEncoder(cfg, np.random.default_rng(seed))
    for p in enc.parameters():
        p.data = p.data.astype(np.float64)
    y = np.random.default_rng(seed).normal(size=(1, 4, 8, 8))
    y = np.where(np.abs(y) < 0.05, 0.1, y)
    assert gradcheck(lambda t: enc(t), y) < 1e-4


def test_model_config_validation_and_id():
    with pytest.raises(ValueError):
        ModelConfig(K=0)
    with pytest.raises(ValueError):
        ModelConfig(base_channels=30, attention_reduction=8)
    assert ModelConfig().model_id == ModelConfig().model_id
    assert ModelConfig().model_id != ModelConfig(latent_channels=48).model_id
    cfg = ModelConfig(latent_channels=24, linear=True)
    assert ModelConfig.from_records(cfg.to_records()) == cfg


def test_model_config_file(tmp_path):
    path = tmp_path / "model.cfg"
    path.write_text("# desk\nbase_channels = 16\nlatent_channels=24\nactivation=relu\n")
    cfg = ModelConfig.from_file(path)
    assert (cfg.base_channels, cfg.latent_channels) == (16, 24)
    path.write_text("width=3\n")
    with pytest.raises(ValueError, match="width"):
        ModelConfig.from_file(path)


def test_model_forward_shapes_and_round_mode():
    model = FrequencyCodec(ModelConfig(), seed=0)
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 64, 64)).astype(np.float32))
    res = model(x, mode="round")
    lat = res.latents
    assert res.x_hat.shape == (1, 3, 64, 64)
    assert lat.y["high"].shape[2:] == (4, 4)
    assert lat.y["mid"].shape[2:] == (8, 8)
    assert lat.y["low"].shape[2:] == (16, 16)
    for s in lat.y_hat:
        assert np.array_equal(lat.y_hat[s].data, np.round(lat.y_hat[s].data))
        assert lat.z_hat[s].shape[2:] == tuple(d // 4 for d in lat.y[s].shape[2:])

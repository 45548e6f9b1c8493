import numpy as np
import pytest

from enspost.metrics import crps_gaussian
from enspost.models import (
    BiasNet, ModelConfig, SpreadNet, build_model, calibrated_forecast, load_model, parse_model_id,
    predict, save_model, SIGMA_FLOOR,
)
from enspost.preprocess import EnsembleSample, LEAD_TIMES, assemble_batch, fit_las, spread_channel
from enspost.tensor import Tensor, backward, no_grad, tmean

# frozen for the default configs
SPREAD_PARAMS = 109585
BIAS_PARAMS = 573888


def small_cfg(**kw):
    base = dict(height=16, width=32, n_inception_blocks=2, base_filters=8, unet_widths=(4, 8, 8), seed=3)
    base.update(kw)
    return ModelConfig(**base)


def fake_inputs(rng, cfg, n=2):
    x = rng.normal(size=(n, cfg.in_channels, cfg.height, cfg.width))
    for lt in LEAD_TIMES:
        c = spread_channel(cfg.n_input_members, lt)
        x[:, c] = rng.uniform(0.2, 1.5, size=(n, cfg.height, cfg.width))
    return x.astype(np.float32)


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


def make_samples(rng, n=4, shape=(16, 32), members=10):
    out = []
    for i in range(n):
        base = rng.normal(size=shape)
        m = {lt: (base + rng.normal(size=(members, *shape)) * (0.3 + lt / 100)).astype(np.float32)
             for lt in LEAD_TIMES}
        out.append(EnsembleSample(m, (base + 0.2 * rng.normal(size=shape)).astype(np.float32), i))
    return out


# -- config and ids ---------------------------------------------------------------

def test_config_validation_and_json():
    with pytest.raises(ValueError):
        ModelConfig(head="other")
    with pytest.raises(ValueError):
        ModelConfig(unet_levels=4)
    with pytest.raises(ValueError, match="pad"):
        ModelConfig(head="bias", height=30, width=64)
    ModelConfig(head="spread", height=30, width=64)
    cfg = ModelConfig(head="bias", dilation_rates=(1, 3))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("text", ["E5", "E10", "Lin5", "EMOS5", "B5", "U5", "B5U5", "B5U5C", "U3"])
def test_model_id_roundtrip(text):
    assert str(parse_model_id(text)) == text


def test_model_id_fields_and_errors():
    mid = parse_model_id("B5U5C")
    assert (mid.kind, mid.n, mid.bias, mid.spread, mid.crps) == ("net", 5, True, True, True)
    assert parse_model_id("E10").kind == "raw"
    for bad in ("", "X5", "B5U3", "U5C", "C", "B5U5CC", "E"):
        with pytest.raises(ValueError, match="grammar|member|needs"):
            parse_model_id(bad)


def test_parameter_counts_are_deterministic():
    assert build_model(ModelConfig(head="spread")).num_parameters() == SPREAD_PARAMS
    assert build_model(ModelConfig(head="bias")).num_parameters() == BIAS_PARAMS
    assert build_model(ModelConfig(head="bias", seed=9)).num_parameters() == BIAS_PARAMS


# -- spread net --------------------------------------------------------------------

def test_spread_net_shape_and_init_guarantee(rng):
    cfg = ModelConfig()
    net = SpreadNet(cfg)
    x = fake_inputs(rng, cfg)
    out = net(Tensor(x))
    assert out.shape == (2, 1, 32, 64)
    nwp = x[:, spread_channel(5, 48)][:, None]
    assert np.max(np.abs(out.data - nwp) / nwp) < 1e-2
    assert np.all(out.data > 0)


def test_spread_net_zero_weights_hand_formula(rng):
    cfg = small_cfg()
    net = SpreadNet(cfg)
    for name, p in net.named_parameters():
        if name != "w":
            p.data[...] = 0.0
    net.w.data[...] = rng.normal(size=net.w.shape)
    x = fake_inputs(rng, cfg)
    with no_grad():
        out = net(Tensor(x)).data
    s = 1 / (1 + np.exp(-net.w.data))
    expect = s * (np.log(2.0) + SIGMA_FLOOR) + (1 - s) * x[:, spread_channel(5, 48)][:, None]
    np.testing.assert_allclose(out, expect, rtol=1e-5)


def test_spread_net_residual_identity(rng):
    cfg = small_cfg()
    net = SpreadNet(cfg)
    for block in net.blocks:
        zero_params(block)
    x = Tensor(fake_inputs(rng, cfg))
    with no_grad():
        np.testing.assert_array_equal(net.features(x).data, net.stem(net.encode(x)).data)


def test_spread_net_positive_for_extreme_params(rng):
    cfg = small_cfg()
    net = SpreadNet(cfg)
    for p in net.parameters():
        p.data[...] = rng.normal(size=p.shape) * 5
    x = fake_inputs(rng, cfg) * 20
    x[:, spread_channel(5, 48)] = 0.0
    with no_grad():
        assert np.all(net(Tensor(x)).data > 0)


def test_spread_trunk_commutes_with_longitude_rotation(rng):
    cfg = small_cfg(wrap_longitude=True)
    net = SpreadNet(cfg)
    x = fake_inputs(rng, cfg)
    with no_grad():
        a = net.trunk(Tensor(np.roll(x, 5, axis=-1))).data
        b = np.roll(net.trunk(Tensor(x)).data, 5, axis=-1)
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_spread_net_rejects_wrong_channels(rng):
    net = SpreadNet(small_cfg())
    with pytest.raises(ValueError, match="expected"):
        net(Tensor(np.zeros((1, 20, 16, 32), np.float32)))


def test_spread_net_gradients_reach_all_parameters(rng):
    cfg = small_cfg()
    net = SpreadNet(cfg)
    out = net(Tensor(fake_inputs(rng, cfg)))
    backward(tmean(out * out))
    for name, p in net.named_parameters():
        assert p.grad is not None and np.isfinite(p.grad).all(), name


# -- bias net ------------------------------------------------------------------------

def test_bias_net_zero_init_identity(rng):
    cfg = ModelConfig(head="bias")
    net = BiasNet(cfg)
    x = fake_inputs(rng, cfg)
    out = net(Tensor(x))
    assert out.shape == (2, 1, 32, 64)
    assert np.all(out.data == 0.0)
    assert net.bottleneck_shape() == (4, 8)


def test_bias_net_bottleneck_dims(rng):
    cfg = ModelConfig(head="bias")
    net = BiasNet(cfg)
    x = Tensor(fake_inputs(rng, cfg, n=1))
    with no_grad():
        h, skips = net.down_path(x)
    assert h.shape[2:] == (4, 8)
    assert [s.shape[1:] for s in skips] == [(16, 32, 64), (32, 16, 32), (64, 8, 16)]


def test_bias_net_level_zero_is_per_gridpoint_affine():
    cfg = ModelConfig(head="bias", unet_levels=0, height=8, width=16)
    net = BiasNet(cfg)
    assert net.num_parameters() == 8 * 16 * (cfg.in_channels + 1)
    assert [n for n, _ in net.named_parameters()] == ["out.weight", "out.bias"]


def test_bias_net_lcn_breaks_translation_symmetry(rng):
    cfg = small_cfg(head="bias", wrap_longitude=True, unet_levels=1)
    net = BiasNet(cfg)
    net.out.weight.data[...] = rng.normal(size=net.out.weight.shape)
    x = fake_inputs(rng, cfg)
    with no_grad():
        a = net(Tensor(np.roll(x, 3, axis=-1))).data
        b = np.roll(net(Tensor(x)).data, 3, axis=-1)
    assert np.abs(a - b).max() > 1e-3


def test_bias_net_without_lcn(rng):
    cfg = small_cfg(head="bias", lcn_enabled=False)
    net = BiasNet(cfg)
    with no_grad():
        assert np.all(net(Tensor(fake_inputs(rng, cfg))).data == 0)


def test_bias_net_rejects_indivisible_grid(rng):
    net = BiasNet(small_cfg(head="bias"))
    with pytest.raises(ValueError):
        net(Tensor(np.zeros((1, 21, 12, 32), np.float32)))


# -- composition ---------------------------------------------------------------------

def test_untrained_composition_equals_dressed_raw_ensemble(rng):
    samples = make_samples(rng)
    maps = fit_las(samples, filter_size=5, gaussian_sigma=2.0)
    batch = assemble_batch(samples, maps, 5)
    bias = BiasNet(small_cfg(head="bias"))
    spread = SpreadNet(small_cfg())
    fd = calibrated_forecast(bias, spread, batch, maps)
    np.testing.assert_allclose(fd.mu, batch.raw_mean, atol=1e-5)
    dressed = crps_gaussian(batch.raw_mean, batch.raw_spread, batch.raw_truth).mean()
    assert abs(fd.crps(batch.raw_truth).mean() - dressed) < 1e-4
    # standardising the forecast mean reproduces the network-space mean
    np.testing.assert_allclose(maps.standardize(fd.mu), batch.inputs[:, 2 * 7].astype(np.float64), atol=1e-5)


def test_calibrated_forecast_rejects_mismatched_maps(rng):
    samples = make_samples(rng)
    maps = fit_las(samples, filter_size=5, gaussian_sigma=2.0)
    other = fit_las(samples[:2], filter_size=5, gaussian_sigma=2.0)
    bias = BiasNet(small_cfg(head="bias"))
    bias.las_fingerprint = other.fingerprint()
    with pytest.raises(ValueError, match="LAS"):
        calibrated_forecast(bias, None, assemble_batch(samples, maps, 5), maps)


def test_save_load_model(tmp_path, rng):
    cfg = small_cfg(head="bias")
    net = BiasNet(cfg)
    net.out.weight.data[...] = rng.normal(size=net.out.weight.shape)
    x = fake_inputs(rng, cfg)
    net(Tensor(x))  # update running stats
    save_model(tmp_path / "b.ckpt", net, "abc")
    back = load_model(tmp_path / "b.ckpt")
    assert back.las_fingerprint == "abc"
    np.testing.assert_array_equal(predict(back, x), predict(net, x))
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing.ckpt")

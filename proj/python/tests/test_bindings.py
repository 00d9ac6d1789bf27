import numpy as np
import pytest

import restormixer as rmx


def small_model(**kw):
    cfg = dict(base_channels=8, stages=2, blocks_per_stage=2, window_base=4, window_step=4, ssm_state=4)
    cfg.update(kw)
    return rmx.Model(**cfg)


def test_default_model_size():
    m = rmx.Model()
    cost = m.cost(256, 256)
    assert m.param_count() == cost["params"]
    assert 2.38e6 <= m.param_count() <= 3.22e6
    assert sum(i["params"] for i in cost["items"]) == cost["params"]
    assert m.cost(256, 256, flops_per_mac=2)["flops"] == pytest.approx(2 * cost["macs"] + cost["elementwise"])


def test_forward_shapes_and_crop():
    m = small_model()
    x = rmx.procedural_image(30, 22, 3)
    scales = m.forward(x)
    assert [s.shape for s in scales] == [(1, 3, 30, 22), (1, 3, 15, 11)]
    assert m.restore(x).shape == (3, 30, 22)
    batch = np.stack([x, x[:, ::-1, :]])
    assert m.restore(batch).shape == (2, 3, 30, 22)


def test_zero_heads_is_identity():
    m = small_model()
    m.zero_heads()
    x = rmx.procedural_image(16, 16, 4)
    np.testing.assert_array_equal(m.restore(x), x)


def test_save_load_round_trip(tmp_path):
    m = small_model(init_seed=3)
    path = str(tmp_path / "m.ckpt")
    m.save(path)
    back = rmx.Model.load(path)
    assert back.config == m.config
    x = rmx.procedural_image(16, 16, 5)
    np.testing.assert_array_equal(back.restore(x), m.restore(x))
    with pytest.raises(rmx.IoError):
        rmx.Model.load(str(tmp_path / "missing.ckpt"))


def test_config_errors():
    with pytest.raises(rmx.ConfigError):
        rmx.Model(no_such_key=1)
    with pytest.raises(rmx.ShapeError):
        small_model().restore(np.zeros((4, 8, 8)))


def test_metrics():
    x = rmx.procedural_image(24, 24, 1)
    y = np.clip(x + 0.1, 0, 1)
    assert rmx.psnr(x, x) == float("inf")
    assert rmx.psnr(x, x + 0.1, space="rgb") == pytest.approx(20.0, abs=1e-9)
    assert rmx.ssim(x, x) == pytest.approx(1.0, abs=1e-6)
    assert rmx.ssim(x, y, space="y") < 1.0
    preds = [x[None], x[None, :, ::2, ::2] * 0 + 0.5]
    assert rmx.total_loss(preds, x[None]) > 0


def test_synthetic_pairs_and_png(tmp_path):
    clean = rmx.procedural_image(32, 32, 7)
    deg, cln = rmx.synth_degrade(clean, "rain", 11)
    deg2, _ = rmx.synth_degrade(clean, "rain", 11)
    np.testing.assert_array_equal(deg, deg2)
    assert deg.min() >= 0 and deg.max() <= 1
    small, big = rmx.synth_degrade(clean, "downsample2", 0)
    assert small.shape == (3, 16, 16) and big.shape == (3, 32, 32)
    path = str(tmp_path / "a.png")
    rmx.save_image(deg, path)
    assert np.abs(rmx.load_image(path) - deg).max() <= 0.5 / 255 + 1e-12


def test_oracle_suite_passes():
    results = rmx.verify("oracles")
    assert results and all(r["passed"] for r in results)

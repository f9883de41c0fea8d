import numpy as np
import pytest

from capslu.autodiff import Tensor
from capslu.baseline import (
    HIDDEN_UNITS, baseline_count_params, baseline_forward, baseline_loss, init_baseline,
)
from capslu.gradcheck import check, model_case, tiny_model_config
from capslu.model import ModelConfig, encode, lengths_to_mask


def test_zero_weights_give_half():
    config = tiny_model_config()
    params = init_baseline(config, 0, np.float64, hidden=4)
    for p in params.values():
        p.data[...] = 0
    l = baseline_forward(np.random.default_rng(0).normal(size=(5, 3)), params, config).data
    np.testing.assert_array_equal(l, 0.5)


def test_formula_oracle_and_single_frame_pool():
    config = tiny_model_config(encoder_layers=1)
    params = init_baseline(config, 1, np.float64, hidden=6)
    p = {k: v.data for k, v in params.items()}
    for T in (1, 5):
        F = np.random.default_rng(T).normal(size=(T, 3))
        H = encode(F, params, config)[0].data[0]
        m = H.max(axis=0)
        if T == 1:
            np.testing.assert_array_equal(m, H[0])
        h = np.maximum(p["dec.W_h"] @ m + p["dec.b_h"], 0)
        expected = 1 / (1 + np.exp(-(p["dec.W_o"] @ h + p["dec.b_o"])))
        np.testing.assert_allclose(baseline_forward(F, params, config).data[0], expected, rtol=1e-12)


def test_max_pool_ignores_padding():
    config = tiny_model_config()
    params = init_baseline(config, 2, np.float64, hidden=4)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 3))
    batch = np.full((2, 8, 3), 50.0)
    batch[0, :4] = x
    batch[1] = rng.normal(size=(8, 3))
    l = baseline_forward(batch, params, config, lengths_to_mask([4, 8], 8, np.float64)).data
    np.testing.assert_allclose(l[0], baseline_forward(x, params, config).data[0], atol=1e-12)


def test_loss_values_and_clamp():
    l = Tensor(np.array([[0.5, 0.5]]))
    assert float(baseline_loss(l, [[1, 0]]).data) == pytest.approx(np.log(2))
    sat = float(baseline_loss(Tensor(np.array([[0.0, 1.0]])), [[1, 0]]).data)
    assert np.isfinite(sat) and sat == pytest.approx(-np.log(1e-7), rel=1e-6)
    assert float(baseline_loss(Tensor(np.array([[1.0, 0.0]])), [[1, 0]]).data) < 1e-6
    with pytest.raises(ValueError):
        baseline_loss(l, [[1, 0, 0]])


def test_param_count():
    config = ModelConfig(n_labels=30)
    assert baseline_count_params(config) == 2_320_926
    assert abs(baseline_count_params(config) - 2.3e6) <= 0.1 * 2.3e6
    tiny = tiny_model_config()
    params = init_baseline(tiny, 0)
    assert sum(p.data.size for p in params.values()) == baseline_count_params(tiny)
    assert params["dec.W_h"].shape == (HIDDEN_UNITS, tiny.feature_width)


@pytest.mark.parametrize("seed", range(3))
def test_full_baseline_gradient(seed):
    fn, inputs = model_case("baseline", np.random.default_rng(seed))
    assert check(fn, inputs) < 1e-4


def test_loss_gradient():
    t = np.array([[1, 0, 1], [0, 0, 1]])
    l = np.random.default_rng(4).uniform(0.05, 0.95, size=(2, 3))
    assert check(lambda x: baseline_loss(x[0], t), [l]) < 1e-4

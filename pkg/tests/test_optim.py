
import numpy as np
import pytest

from headlab import tensor as T
from headlab.optim import Adam, load_checkpoint, save_checkpoint


def test_first_step_value():
    p = T.parameter(np.array([1.0]))
    opt = Adam([p], lr=1e-3)
    opt.step([np.array([0.5])])
    # high-precision oracle: -lr * g / (|g| + eps) on the first bias-corrected step
    assert p.data[0] - 1.0 == pytest.approx(-9.99999980000000399e-4, rel=1e-9)


def test_zero_gradient_leaves_parameters():
    p = T.parameter(np.arange(4.0))
    opt = Adam([p], lr=0.1)
    for _ in range(5):
        opt.step([np.zeros(4)])
    np.testing.assert_array_equal(p.data, np.arange(4.0))


@pytest.mark.parametrize("g", [-3.0, -1e-6, 2e-4, 7.0])
def test_first_step_sign(g):
    p = T.parameter(np.array([0.0]))
    Adam([p], lr=1e-2).step([np.array([g])])
    assert np.sign(p.data[0]) == -np.sign(g)


def test_inactive_parameters_frozen_with_moments():
    a, b = T.parameter(np.ones(2)), T.parameter(np.ones(2))
    opt = Adam([a, b], lr=0.1)
    opt.step([np.ones(2), np.ones(2)], active=[True, False])
    np.testing.assert_array_equal(b.data, np.ones(2))
    np.testing.assert_array_equal(opt.state.v[1], np.zeros(2))
    assert a.data[0] < 1.0


def test_per_parameter_rates_and_shape_errors():
    a, b = T.parameter(np.zeros(1)), T.parameter(np.zeros(1))
    opt = Adam([a, b], lrs=[0.1, 0.01])
    opt.step([np.ones(1), np.ones(1)])
    assert a.data[0] == pytest.approx(10 * b.data[0])
    with pytest.raises(ValueError):
        opt.step([np.ones(2), np.ones(1)])
    with pytest.raises(ValueError):
        opt.step([np.ones(1)])


def test_checkpoint_round_trip(tmp_path):
    named = {"w": T.parameter(np.arange(6.0).reshape(2, 3)), "b": T.parameter(np.array([-1.5]))}
    path = save_checkpoint(tmp_path / "ck", named, {"note": "x"})
    arrays, meta = load_checkpoint(path)
    np.testing.assert_array_equal(arrays["w"], named["w"].data)
    assert meta["note"] == "x" and meta["blob"] == "ck.bin"
    raw = (tmp_path / "ck.bin").read_bytes()
    assert raw[:8] == np.array([0.0], "<f8").tobytes() and len(raw) == 7 * 8
    save_checkpoint(tmp_path / "ck2", named, {"note": "x"})
    assert (tmp_path / "ck2.bin").read_bytes() == raw

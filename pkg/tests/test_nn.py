from __future__ import annotations

import numpy as np
import pytest

from hoseg import nn
from gradcheck import numeric_grad, predictor_grad_errors, rel_error


def _model(cin, cout, seed=0):
    return nn.ReferencePredictor(cin, cout, hidden=4, dilations=(1, 2, 1), seed=seed, dtype=np.float64)


def test_cross_entropy_gradients_8x8():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 8, 8, 3))
    t = rng.integers(0, 3, (2, 8, 8))
    errs = predictor_grad_errors(_model(3, 3), x, nn.cross_entropy, t)
    assert max(errs) < 1e-3, errs


def test_bce_gradients_8x8():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 8, 8, 5))
    t = (rng.random((2, 8, 8, 1)) < 0.3).astype(float)
    errs = predictor_grad_errors(_model(5, 1), x, nn.bce_with_logits, t)
    assert max(errs) < 1e-3, errs


def test_conv_input_gradient():
    rng = np.random.default_rng(2)
    conv = nn.Conv2d(3, 2, rng, dilation=2, dtype=np.float64)
    x = rng.standard_normal((1, 6, 6, 3))
    w = rng.standard_normal((1, 6, 6, 2))
    conv.forward(x, train=True)
    dx, _ = conv.backward(w)
    num = numeric_grad(lambda: float((conv.forward(x) * w).sum()), x)
    assert rel_error(dx, num) < 1e-6


def test_linear_gradients():
    rng = np.random.default_rng(3)
    lin = nn.Linear(4, 3, rng, dtype=np.float64)
    x = rng.standard_normal((5, 4))
    t = rng.integers(0, 3, 5)
    _, g = nn.cross_entropy(lin.forward(x, True), t)
    dx, (dw, db) = lin.backward(g)
    f = lambda: nn.cross_entropy(lin.forward(x), t)[0]  # noqa: E731
    assert rel_error(dw, numeric_grad(f, lin.weight)) < 1e-6
    assert rel_error(db, numeric_grad(f, lin.bias)) < 1e-6
    assert rel_error(dx, numeric_grad(f, x)) < 1e-6


def test_losses_closed_forms():
    loss, _ = nn.cross_entropy(np.zeros((4, 3)), np.array([0, 1, 2, 0]))
    assert loss == pytest.approx(np.log(3), abs=1e-12)
    loss, _ = nn.bce_with_logits(np.zeros((3, 1)), np.array([[0.0], [1.0], [1.0]]))
    assert loss == pytest.approx(np.log(2), abs=1e-12)
    assert nn.sigmoid(np.array([0.0]))[0] == 0.5
    assert np.allclose(nn.softmax(np.array([[1000.0, 1000.0]])), 0.5)


def test_output_layout_and_channel_check():
    m = nn.ReferencePredictor(5, 4)
    x = np.zeros((5, 7, 9), np.float32)
    assert m(x).shape == (4, 7, 9)
    assert m(x[None].repeat(2, 0)).shape == (2, 4, 7, 9)
    with pytest.raises(ValueError):
        m(np.zeros((3, 7, 9), np.float32))
    assert isinstance(m, nn.TrainablePredictor)


def test_sgd_zero_lr_and_update_rule():
    p = [np.array([1.0, -2.0])]
    opt = nn.SGD(p, lr=0.0, momentum=0.9, weight_decay=0.1)
    opt.step([np.array([5.0, 5.0])])
    assert np.array_equal(p[0], [1.0, -2.0])
    opt = nn.SGD(p, lr=0.5, momentum=0.5, weight_decay=0.0)
    opt.step([np.array([1.0, 1.0])])
    opt.step([np.array([1.0, 1.0])])
    # v1 = 1, v2 = 0.5 + 1 = 1.5; p = p0 - 0.5 * (1 + 1.5)
    assert np.allclose(p[0], [1.0 - 1.25, -2.0 - 1.25])


def test_checkpoint_roundtrip_and_bytes(tmp_path):
    m = nn.ReferencePredictor(3, 3, seed=4)
    nn.save_checkpoint(tmp_path / "a.npz", m.params, {"model": m.config()})
    nn.save_checkpoint(tmp_path / "b.npz", m.params, {"model": m.config()})
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    params, header = nn.load_checkpoint(tmp_path / "a.npz")
    assert header["version"] == 1 and header["model"]["hidden"] == 16
    other = nn.ReferencePredictor(3, 3, seed=9)
    other.set_params(params)
    x = np.random.default_rng(0).standard_normal((3, 6, 6)).astype(np.float32)
    assert np.array_equal(other(x), m(x))
    with pytest.raises(ValueError):
        other.set_params([np.zeros(1)] * len(params))

import numpy as np
import pytest

from tabssl.errors import OracleError
from tabssl.gradcheck import check_gradient
from tabssl.rng import Rng
from tabssl.tensor import Tensor, dropout, layer_norm


def t(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def test_quadratic_is_exact():
    x = t([3.0])
    report = check_gradient(lambda: (x * x).sum(), [("x", x)])
    assert report.passed
    assert report.max_rel_err < 1e-8


def test_layer_norm_composite():
    x = t(np.random.default_rng(0).normal(size=(4, 6)))
    gain = t(np.random.default_rng(1).normal(size=6))
    bias = t(np.random.default_rng(2).normal(size=6))

    def f():
        return (layer_norm(x, gain, bias) * layer_norm(x, gain, bias)).sum()

    report = check_gradient(f, [("x", x), ("gain", gain), ("bias", bias)],
                            tolerance=1e-5)
    assert report.passed, str(report)


def test_frozen_dropout_mask_passes():
    x = t(np.random.default_rng(3).normal(size=32))
    mask = Tensor((np.random.default_rng(4).random(32) >= 0.5).astype(np.float64))

    def f():
        return (x * mask * x).sum()

    assert check_gradient(f, [("x", x)]).passed


def test_live_dropout_is_oracle_invalid():
    x = t(np.random.default_rng(5).normal(size=64))
    stream = Rng(0).stream("dropout")

    def f():
        return dropout(x, 0.5, rng=stream, training=True).sum()

    with pytest.raises(OracleError):
        check_gradient(f, [("x", x)])


def test_report_renders_verdict():
    x = t([1.0])
    report = check_gradient(lambda: (x * x).sum(), [("x", x)])
    assert "PASS" in str(report)

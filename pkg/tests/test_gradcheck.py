"""The finite-difference harness itself, and per-op spot checks."""

import numpy as np

import refbox.tensor as T
from refbox.gradcheck import grad_check


def test_identity_has_zero_error():
    report = grad_check(lambda x: T.sum_(x), [np.arange(6.0).reshape(2, 3)])
    assert report.max_rel_err < 1e-10
    assert report.passed(1e-4)


def test_softmax_of_matmul():
    rng = np.random.default_rng(0)
    c = T.as_tensor(rng.normal(size=(3, 3)), dtype="float64")
    report = grad_check(
        lambda x: T.sum_(T.mul(T.softmax(T.matmul(x, x), axis=-1), c)),
        [rng.normal(size=(3, 3))])
    assert report.max_rel_err < 1e-5


def test_layer_norm_near_constant_input_stays_finite():
    # The eps guard keeps both the forward value and the comparison finite.
    x = np.full((3, 6), 2.0) + np.random.default_rng(1).normal(size=(3, 6)) * 1e-8
    g = np.ones(6)
    b = np.zeros(6)
    report = grad_check(lambda x, g, b: T.sum_(T.layer_norm(x, g, b)), [x, g, b])
    assert np.isfinite(report.max_rel_err)
    assert not report.failures


def test_sampled_coordinates_mode():
    rng = np.random.default_rng(2)
    report = grad_check(lambda x: T.sum_(T.mul(x, x)), [rng.normal(size=(20, 20))],
                        sample=10, rng=np.random.default_rng(0))
    assert report.max_rel_err < 1e-6


def test_report_labels():
    report = grad_check(lambda a, b: T.sum_(T.add(a, b)),
                        [np.ones(3), np.ones(3)], labels=["left", "right"])
    assert [name for name, _ in report.per_input] == ["left", "right"]

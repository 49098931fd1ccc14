import numpy as np
import pytest

from changealign import checks
from changealign import tensorcore as tc
from changealign.gradcheck import grad_check
from changealign.tensorcore import Tensor, _make


def test_linear_op_is_exact():
    x = np.random.default_rng(0).standard_normal((2, 3, 4))
    report = grad_check(tc.gap, [x])
    assert report.passed and report.max_rel_err < 1e-5


def test_tanh_passes_in_float32():
    x = np.random.default_rng(1).standard_normal((4, 5)) * 2
    report = grad_check(tc.tanh, [x])
    assert report.passed and report.max_rel_err <= 1e-2


def test_wrong_backward_is_caught():
    def bad_square(a):
        a = tc.as_tensor(a)
        # forward is a^2, backward claims 3a
        return _make(a.data * a.data, (a,), lambda g: (3 * a.data * g,), "bad_square")

    report = grad_check(bad_square, [np.random.default_rng(2).uniform(0.5, 1.5, size=5)])
    assert not report.passed
    assert report.max_rel_err > 0.3
    assert "arg0" in report.worst


def test_nan_is_reported_with_location():
    report = grad_check(tc.log, [np.array([1.0, 1e-4, 2.0])], eps=1e-3)
    assert not report.passed
    assert report.failures and "arg0(1,)" in report.failures[0]


def test_bilinear_quarter_offsets_pass():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((1, 5, 5))
    coords = tc.identity_grid(5, 5) + rng.choice([-0.75, -0.25, 0.25, 0.75], size=(2, 5, 5))
    assert grad_check(tc.bilinear_sample, [f, coords]).passed


def test_report_line_format():
    line = grad_check(tc.gap, [np.ones((1, 2, 2))], op_name="gap").line()
    assert line.startswith("PASS gap: max_rel_err=")


def test_wrt_restricts_checked_inputs():
    rng = np.random.default_rng(4)
    report = grad_check(tc.mul, [rng.standard_normal(3), rng.standard_normal(3)], wrt=[1])
    assert report.n_checked == 3


@pytest.mark.parametrize("name", sorted(checks.CHECKS))
def test_registered_check_single_seed(name):
    report = checks.run([name], seeds=[7])[name]
    assert report.passed, report.line()


def test_unknown_check_name():
    with pytest.raises(KeyError):
        checks.run(["softmax"])


def test_gated_ops_are_registered():
    assert set(checks.GATED) <= set(checks.CHECKS)
    assert set(tc.ELEMENTWISE_KINDS) >= {"add", "sub", "mul", "div", "abs", "relu", "tanh", "sigmoid"}


def test_grad_leaves_inputs_untouched():
    x = np.random.default_rng(5).standard_normal(4)
    before = x.copy()
    grad_check(tc.square, [x])
    assert np.array_equal(x, before)
    assert isinstance(Tensor(x).data, np.ndarray)

import numpy as np
import pytest

from dronekd.engine import Tensor, check_gradients, gradcheck, log_softmax, registered_ops


def test_every_registered_op_matches_finite_differences():
    report = check_gradients(epsilon=1e-3, seeds=20)
    assert set(report.max_rel_err) == set(registered_ops())
    for op, err in report.max_rel_err.items():
        assert err < 1e-3, f"{op}: rel err {err}"


def test_softmax_kl_gradient_matches_central_differences():
    # Frozen target distribution, KL(p || softmax(x)) differentiated w.r.t. x.
    rng = np.random.default_rng(42)
    p = rng.random(6)
    p /= p.sum()
    p_t = Tensor(p)

    def loss_fn(x):
        logq = log_softmax(x, axis=-1)
        return -(p_t * logq).sum()

    x = Tensor(rng.standard_normal(6), requires_grad=True, dtype=np.float64)
    assert gradcheck(loss_fn, [x], eps=1e-3) < 1e-3


def test_epsilon_must_be_positive():
    with pytest.raises(ValueError, match="positive"):
        check_gradients(epsilon=0.0)


def test_kink_fixtures_report_resampling():
    report = check_gradients(epsilon=1e-3, seeds=20, ops=["relu", "abs", "maximum"])
    assert all(err < 1e-3 for err in report.max_rel_err.values())
    # resample counters exist for every kinked op (may legitimately be zero)
    assert set(report.resampled) == {"relu", "abs", "maximum"}

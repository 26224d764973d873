import numpy as np
import pytest

from slicesolver.errors import DegenerateTargetError, ShapeError
from slicesolver.linalg import make_rng
from slicesolver.metrics import mae_per_column, metrics, r2_per_column, rel_l2


@pytest.fixture
def truth():
    return make_rng(1).standard_normal((50, 3)) + 0.5


class TestDefinitionalIdentities:
    def test_perfect_prediction(self, truth):
        m = metrics(truth.copy(), truth)
        assert m["rel_l2"] == 0.0
        assert all(r == pytest.approx(1.0) for r in m["r2"])
        assert all(v == 0.0 for v in m["mae"])

    def test_zero_prediction_rel_l2_is_one(self, truth):
        assert rel_l2(np.zeros_like(truth), truth) == pytest.approx(1.0, abs=1e-15)

    def test_mean_prediction_r2_is_zero(self, truth):
        pred = np.tile(truth.mean(axis=0), (truth.shape[0], 1))
        assert all(r == pytest.approx(0.0, abs=1e-12) for r in r2_per_column(pred, truth))


class TestEdgeCases:
    def test_rel_l2_is_joint_over_columns(self, truth):
        pred = truth + 0.1
        joint = rel_l2(pred, truth)
        manual = np.sqrt(((pred - truth) ** 2).sum()) / np.sqrt((truth ** 2).sum())
        assert joint == pytest.approx(manual, rel=1e-15)

    def test_zero_norm_truth_rejected(self):
        with pytest.raises(DegenerateTargetError):
            rel_l2(np.ones((4, 1)), np.zeros((4, 1)))

    def test_constant_truth_column_r2_undefined(self):
        truth = np.column_stack([np.full(10, 2.0), np.arange(10.0)])
        pred = truth + 0.5
        r2 = r2_per_column(pred, truth)
        assert r2[0] is None and r2[1] is not None

    def test_single_sample_r2_undefined(self):
        assert r2_per_column(np.ones((1, 1)), np.ones((1, 1))) == [None]

    def test_mae_per_column(self):
        truth = np.zeros((4, 2))
        pred = np.column_stack([np.full(4, 2.0), np.array([1.0, -1.0, 1.0, -1.0])])
        assert mae_per_column(pred, truth) == [2.0, 1.0]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            rel_l2(np.zeros((3, 1)), np.zeros((4, 1)))

    def test_one_dimensional_series_accepted(self):
        truth = np.arange(5.0)
        assert r2_per_column(truth, truth) == [pytest.approx(1.0)]

import time

import pytest

from balancedfmm.stage_objects import STAGES, P2PVariance, StageReport, SweepPoint


def test_timed_accumulates_into_one_stage():
    report = StageReport(rank=0)
    with report.timed("P2P"):
        time.sleep(0.01)
    with report.timed("P2P"):
        pass
    assert report.times["P2P"] > 0.0
    assert report.total == pytest.approx(sum(report.times.values()))
    assert set(report.times) == set(STAGES)


def test_unknown_stage():
    with pytest.raises(KeyError):
        with StageReport(rank=0).timed("FFT"):
            pass


def test_balance_ratio():
    report = StageReport(rank=0, order=4, n_sources=640, n_leaves=8)
    assert report.points_per_leaf == 80
    assert report.balance_ratio == pytest.approx(80 ** 2 / 64)


def test_p2p_variance():
    assert P2PVariance([1.0, 2.0, 3.0]).value == pytest.approx(1.0)
    assert P2PVariance([]).value == 0.0
    assert P2PVariance([0.0, 0.0]).value == 0.0


def test_sweep_point_summary():
    point = SweepPoint("theta", 0.5, [1.0, 3.0, 2.0])
    assert (point.mean, point.min, point.max) == (2.0, 1.0, 3.0)
    assert point.to_dict()["mean"] == 2.0

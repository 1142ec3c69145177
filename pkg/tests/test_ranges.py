import numpy as np
import pytest

from zkslim.model import ActivationTrace
from zkslim.ranges import SiteMismatch, activation_range_stats, range_stats, summary_report


def trace(*sites, scale=None):
    sites = [np.asarray(s, dtype=np.int64) for s in sites]
    return ActivationTrace(sites, np.zeros((sites[0].shape[0], 1)), scale)


def test_site_range_max_minus_min():
    st = range_stats(trace([[-3, 1, 9]]), real_units=False)
    assert st.site_range[0] == 12
    assert st.mean == 12


def test_constant_sites_have_zero_range():
    st = range_stats(trace(np.full((4, 3), 7), np.full((4, 2), -2)))
    np.testing.assert_array_equal(st.site_range, 0)
    assert st.mean == 0 and st.std == 0


def test_per_sample_loss_sums_sites_in_real_units():
    a = [[0, 4096], [0, 8192]]
    b = [[4096, 4096], [0, 4096]]
    st = range_stats(trace(a, b, scale=12))
    np.testing.assert_allclose(st.sample_loss, [1.0, 3.0])
    np.testing.assert_allclose([st.mean, st.std], [2.0, 1.0])
    np.testing.assert_allclose(st.site_max, [2.0, 1.0])


def test_reference_report_shape():
    rep = summary_report(27.39, 5.99, 16.98, 2.64)
    assert round(rep.reduction_pct, 2) == 38.01
    assert round(rep.std_reduction_pct, 1) == 55.9
    assert rep.to_dict()["reduction_pct"] == pytest.approx(38.0065, abs=1e-4)


def test_before_after_reduction():
    rep = activation_range_stats(trace([[0, 10]]), trace([[0, 4]]))
    assert rep.reduction_pct == pytest.approx(60.0)


def test_site_mismatch():
    with pytest.raises(SiteMismatch):
        activation_range_stats(trace([[1, 2]]), trace([[1, 2]], [[3, 4]]))
    with pytest.raises(SiteMismatch):
        activation_range_stats(trace([[1, 2]]), trace([[1, 2, 3]]))

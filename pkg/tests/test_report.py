import json
import math
import statistics

import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sstats

from liquid.bench import (BenchResult, Row, mean_ci, run_benchmark, summarize, synthetic_access_log,
                          validate_scenario)
from liquid.report import EmptyTable, render, results_csv


@settings(deadline=None)
@given(st.lists(st.floats(min_value=-1e3, max_value=1e3, allow_nan=False), min_size=2, max_size=60))
def test_interval_matches_scipy(xs):
    m, lo, hi = mean_ci(xs)
    sem = statistics.stdev(xs) / math.sqrt(len(xs))
    if sem == 0:
        assert lo == hi == pytest.approx(m)
        return
    want = sstats.t.interval(0.95, len(xs) - 1, loc=statistics.fmean(xs), scale=sem)
    assert (m, lo, hi) == pytest.approx((statistics.fmean(xs), *want), rel=1e-9, abs=1e-9)


def test_interval_single_sample():
    assert mean_ci([2.5]) == (2.5, 2.5, 2.5)
    with pytest.raises(ValueError):
        mean_ci([])


def _result():
    r = BenchResult("ports", x_label="exposed ports", y_label="migration time (s)")
    for rep in range(5):
        for p in (0, 10, 50):
            r.samples.append(("cold", str(p), rep, 1.0 + 0.05 * p + 0.01 * rep))
            r.samples.append(("warm", str(p), rep, 1.0 + 0.01 * rep))
    summarize(r, ("cold", "warm"), (0, 10, 50))
    r.extras["repetitions"] = 5
    return r


def test_render_is_byte_identical(tmp_path):
    a = render(_result(), tmp_path / "a")
    b = render(_result(), tmp_path / "b")
    for name in a:
        assert a[name].read_bytes() == b[name].read_bytes(), name
    lines = a["results.csv"].read_text().splitlines()
    assert lines[0] == "series,value,mean,ci_low,ci_high,n"
    assert len(lines) == 7
    assert "t-interval" in a["summary.txt"].read_text()
    assert a["figure.png"].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_one_row_table():
    r = BenchResult("ports", rows=[Row("warm", "0", 1.0, 0.9, 1.1, 3)])
    assert results_csv(r).splitlines() == ["series,value,mean,ci_low,ci_high,n",
                                           "warm,0,1.000000,0.900000,1.100000,3"]


def test_empty_table_is_an_error(tmp_path):
    with pytest.raises(EmptyTable):
        render(BenchResult("ports"), tmp_path)


@pytest.mark.parametrize("bad", [{"variable": "colour", "values": [1]}, {"variable": "ports", "values": []},
                                 {"variable": "ports", "values": [1], "repetitions": 0}])
def test_scenario_validation(bad):
    with pytest.raises(ValueError):
        validate_scenario(bad)


def test_synthetic_log_is_deterministic():
    a, b = synthetic_access_log(50, 3), synthetic_access_log(50, 3)
    assert a == b and len(a) == 50
    assert a != synthetic_access_log(50, 4)


def test_small_process_count_benchmark(tmp_path):
    res = run_benchmark({"variable": "process_count", "values": [2, 4], "repetitions": 2, "seed": 1,
                         "memory_footprint_bytes": 10_000})
    assert res.aborted is None and res.failures == 0
    assert {(r.series, r.value, r.n) for r in res.rows} == {
        ("unprivileged", "2", 2), ("unprivileged", "4", 2), ("privileged", "2", 2), ("privileged", "4", 2)}
    assert all(v == 0 for k, v in res.extras["mean_fork_iterations"].items() if k.startswith("privileged"))
    paths = render(res, tmp_path)
    assert json.dumps(res.extras["mean_fork_iterations"]) and paths["summary.txt"].exists()


def test_small_handler_benchmark():
    res = run_benchmark({"variable": "handler_complexity", "values": ["none", "o1"], "repetitions": 2,
                         "log_lines": 200})
    assert res.aborted is None and res.failures == 0, res.aborted
    assert set(res.means("migration")) == {"none", "o1"}
    assert "o1" in res.extras["overhead_vs_none"]

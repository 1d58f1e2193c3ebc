"""Tests for the market environment and the metric suite."""

from __future__ import annotations

import math

import numpy as np
import pytest

from evoagent.errors import ConfigError, ContractError, DataError
from evoagent.market import (
    CostModel,
    MetricsReport,
    PortfolioState,
    PriceSeries,
    RegimeSegment,
    SynthConfig,
    T_ANN,
    apply_costs,
    compute_metrics,
    load_csv,
    max_drawdown,
    outcome_score,
    step,
    synth_generate,
    write_csv,
)

# ------------------------------------------------------- independent oracle


def percentile_linear(values, q):
    s = sorted(values)
    h = (len(s) - 1) * q / 100.0
    lo = int(math.floor(h))
    frac = h - lo
    if lo + 1 < len(s):
        return s[lo] + frac * (s[lo + 1] - s[lo])
    return s[lo]


def oracle_metrics(returns):
    """Direct-formula reimplementation used as the dual-coding oracle."""
    r = [float(x) for x in returns]
    n = len(r)
    mean = sum(r) / n
    var = sum((x - mean) ** 2 for x in r) / (n - 1)
    std = math.sqrt(var)
    sharpe = math.sqrt(T_ANN) * mean / std if std > 0 else None
    sigma_d = math.sqrt(sum(min(x, 0.0) ** 2 for x in r) / n)
    sortino = math.sqrt(T_ANN) * mean / sigma_d if sigma_d > 0 else None
    equity = [1.0]
    for x in r:
        equity.append(equity[-1] * (1.0 + x))
    peak = equity[0]
    dd = 0.0
    for e in equity[1:]:
        peak = max(peak, e)
        dd = min(dd, e / peak - 1.0)
    calmar = mean * T_ANN / abs(dd) if dd != 0.0 else None
    growth = 1.0
    for x in r:
        growth *= 1.0 + x
    p5 = percentile_linear(r, 5.0)
    p95 = percentile_linear(r, 95.0)
    loss = abs(min(p5, 0.0))
    tail = max(p95, 0.0) / loss if loss > 0 else None
    return {
        "return_pct": (growth - 1.0) * 100.0,
        "sharpe": sharpe,
        "sortino": sortino,
        "calmar": calmar,
        "max_dd_pct": dd * 100.0,
        "win_rate": sum(1 for x in r if x > 0) / n,
        "tail_ratio": tail,
    }


def assert_close(a, b, rel=1e-9):
    if a is None or b is None:
        assert a is None and b is None
        return
    assert abs(a - b) <= rel * max(1.0, abs(a), abs(b))


def make_series_csv(tmp_path, rows):
    path = tmp_path / "prices.csv"
    header = "timestamp,ticker,open,high,low,close,volume\n"
    path.write_text(header + "".join(r + "\n" for r in rows))
    return str(path)


# -------------------------------------------------------------- CSV loader


def test_load_csv_happy_path_aligns_two_tickers(tmp_path):
    path = make_series_csv(
        tmp_path,
        [
            "2024-01-02T14:00:00+00:00,BBB,10,11,9,10.5,1000",
            "2024-01-02T14:00:00+00:00,AAA,20,22,19,21,2000",
            "2024-01-02T15:00:00+00:00,AAA,21,23,20,22,2100",
            "2024-01-02T15:00:00+00:00,BBB,10.5,11,10,10.8,1100",
        ],
    )
    series = load_csv(path)
    assert series.tickers == ("AAA", "BBB")
    assert series.n_bars == 2
    assert series.closes("AAA").tolist() == [21.0, 22.0]
    assert series.closes("BBB").tolist() == [10.5, 10.8]


def test_load_csv_rejects_negative_close(tmp_path):
    path = make_series_csv(
        tmp_path, ["2024-01-02T14:00:00+00:00,AAA,10,11,9,-10.5,1000"]
    )
    with pytest.raises(DataError, match="line 2"):
        load_csv(path)


def test_load_csv_rejects_duplicate_timestamp(tmp_path):
    path = make_series_csv(
        tmp_path,
        [
            "2024-01-02T14:00:00+00:00,AAA,10,11,9,10.5,1000",
            "2024-01-02T14:00:00+00:00,AAA,10,11,9,10.6,1000",
        ],
    )
    with pytest.raises(DataError, match="duplicate"):
        load_csv(path)


def test_load_csv_rejects_misaligned_tickers(tmp_path):
    path = make_series_csv(
        tmp_path,
        [
            "2024-01-02T14:00:00+00:00,AAA,10,11,9,10.5,1000",
            "2024-01-02T14:00:00+00:00,BBB,20,22,19,21,2000",
            "2024-01-02T15:00:00+00:00,AAA,10,11,9,10.6,1000",
        ],
    )
    with pytest.raises(DataError, match="missing"):
        load_csv(path)


def test_load_csv_rejects_multi_day_gap(tmp_path):
    # Friday to Monday is one trading day (fine); Friday to Wednesday is not.
    ok = make_series_csv(
        tmp_path,
        [
            "2024-01-05T14:00:00+00:00,AAA,10,11,9,10.5,1000",
            "2024-01-08T14:00:00+00:00,AAA,10,11,9,10.6,1000",
        ],
    )
    load_csv(ok)
    bad = make_series_csv(
        tmp_path,
        [
            "2024-01-05T14:00:00+00:00,AAA,10,11,9,10.5,1000",
            "2024-01-10T14:00:00+00:00,AAA,10,11,9,10.6,1000",
        ],
    )
    with pytest.raises(DataError, match="gap"):
        load_csv(bad)


def test_load_csv_rejects_bad_header_and_ohlc_order(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,ticker,open,high,low,close,volume\n")
    with pytest.raises(DataError, match="header"):
        load_csv(str(path))
    path2 = make_series_csv(
        tmp_path, ["2024-01-02T14:00:00+00:00,AAA,10,9.5,9,10.5,1000"]
    )
    with pytest.raises(DataError, match="OHLC"):
        load_csv(path2)


def test_csv_round_trip_is_exact(tmp_path):
    cfg = SynthConfig(("AAA", "BBB"), (RegimeSegment("bull", 12, 0.001, 0.01),))
    series = synth_generate(cfg, seed=5)
    path = str(tmp_path / "out.csv")
    write_csv(series, path)
    back = load_csv(path)
    assert back.tickers == series.tickers
    assert np.array_equal(back.close, series.close)
    assert np.array_equal(back.volume, series.volume)
    assert back.timestamps == series.timestamps


# ----------------------------------------------------------------- synth


def test_synth_zero_vol_positive_drift_is_strictly_increasing():
    cfg = SynthConfig(("AAA",), (RegimeSegment("bull", 50, 0.002, 0.0),))
    series = synth_generate(cfg, seed=1)
    closes = series.closes("AAA")
    assert np.all(np.diff(closes) > 0)


def test_synth_same_seed_is_identical():
    cfg = SynthConfig(
        ("AAA", "BBB"),
        (RegimeSegment("bull", 30, 0.001, 0.02), RegimeSegment("bear", 20, -0.001, 0.03)),
    )
    a = synth_generate(cfg, seed=42)
    b = synth_generate(cfg, seed=42)
    assert np.array_equal(a.close, b.close)
    assert np.array_equal(a.volume, b.volume)
    c = synth_generate(cfg, seed=43)
    assert not np.array_equal(a.close, c.close)


def test_synth_long_bull_segment_mean_log_return_matches_drift():
    mu, sigma, bars = 0.0005, 0.01, 10000
    cfg = SynthConfig(("AAA",), (RegimeSegment("bull", bars, mu, sigma),))
    series = synth_generate(cfg, seed=9)
    logr = np.diff(np.log(series.closes("AAA")))
    se = sigma / math.sqrt(logr.size)
    assert abs(float(np.mean(logr)) - mu) <= 3 * se


def test_synth_timestamps_are_business_days_four_per_day():
    cfg = SynthConfig(("AAA",), (RegimeSegment("flat", 12, 0.0, 0.01),))
    series = synth_generate(cfg, seed=2)
    days = {ts.date() for ts in series.timestamps}
    assert len(days) == 3
    for d in days:
        assert d.weekday() < 5
    assert cfg.regime_labels() == ["flat"] * 12


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig((), (RegimeSegment("bull", 10, 0.0, 0.01),))
    with pytest.raises(ConfigError):
        SynthConfig(("AAA",), ())
    with pytest.raises(ConfigError):
        RegimeSegment("bull", 0, 0.0, 0.01)
    with pytest.raises(ConfigError):
        RegimeSegment("bull", 10, 0.0, -0.1)
    with pytest.raises(ConfigError):
        SynthConfig(("AAA",), (RegimeSegment("bull", 10, 0.0, 0.01),), ticker_drift={"ZZZ": 0.1})


# ------------------------------------------------------------- stepping


def test_step_all_cash_earns_zero():
    state = PortfolioState.all_cash(3)
    r, nxt = step(state, state.weights, np.array([0.05, -0.02, 0.01]))
    assert r == 0.0
    assert nxt.equity == 1.0
    assert len(nxt.weight_history) == 1


def test_step_single_asset_carries_its_return():
    state = PortfolioState.all_cash(2)
    w = np.array([1.0, 0.0, 0.0])
    r, nxt = step(state, w, np.array([0.02, -0.05]))
    assert math.isclose(r, 0.02, rel_tol=0, abs_tol=1e-15)
    assert math.isclose(nxt.equity, 1.02, rel_tol=0, abs_tol=1e-12)


def test_step_equal_weight_symmetry_cancels():
    state = PortfolioState.all_cash(10)
    w = np.array([0.1] * 10 + [0.0])
    returns = np.array([0.01, -0.01] + [0.0] * 8)
    r, _ = step(state, w, returns)
    assert abs(r) < 1e-18


def test_step_validates_weights_and_returns():
    state = PortfolioState.all_cash(2)
    with pytest.raises(ContractError):
        step(state, np.array([0.5, 0.2, 0.2]), np.array([0.0, 0.0]))  # sums to 0.9
    with pytest.raises(ContractError):
        step(state, np.array([1.2, -0.2, 0.0]), np.array([0.0, 0.0]))
    with pytest.raises(ContractError):
        step(state, np.array([0.5, 0.5, 0.0]), np.array([0.0]))
    with pytest.raises(ContractError):
        step(state, np.array([0.5, 0.5, 0.0]), np.array([-1.0, 0.0]))


def test_equity_compounds_over_steps():
    state = PortfolioState.all_cash(1)
    w = np.array([1.0, 0.0])
    for r_in in (0.1, -0.05, 0.02):
        _, state = step(state, w, np.array([r_in]))
    assert math.isclose(state.equity, 1.1 * 0.95 * 1.02, rel_tol=1e-12)
    assert len(state.weight_history) == 3


# ---------------------------------------------------------- outcome score


def test_outcome_score_mapping():
    assert outcome_score(0.0) == 0.0
    assert outcome_score(0.01) == 1.0
    assert outcome_score(-0.03) == -1.0
    assert math.isclose(outcome_score(0.005), 0.5)
    assert outcome_score(0.05, scale=0.05) == 1.0
    with pytest.raises(ConfigError):
        outcome_score(0.01, scale=0.0)


# ----------------------------------------------------------------- costs


def test_apply_costs_zero_turnover_is_unchanged():
    w = np.array([0.5, 0.5])  # one asset + cash, held constant
    history = (w, w, w)
    r = np.array([0.01, -0.02, 0.005])
    # First bar incurs the initial all-cash -> 0.5 move.
    adjusted = apply_costs(r, history, cost_bp=10.0)
    assert math.isclose(adjusted[0], 0.01 - 0.001 * 0.5, rel_tol=0, abs_tol=1e-15)
    assert np.array_equal(adjusted[1:], r[1:])


def test_apply_costs_penalty_substitution():
    # 10 bp on 0.5 turnover removes 0.0005 on that bar.
    prev = np.array([0.5, 0.0, 0.5])
    cur = np.array([0.25, 0.25, 0.5])
    r = np.array([0.0, 0.0])
    adjusted = apply_costs(r, (prev, cur), cost_bp=10.0)
    assert math.isclose(adjusted[1], -0.0005, rel_tol=0, abs_tol=1e-15)


def test_apply_costs_zero_bp_is_bitwise_identity():
    rng = np.random.Generator(np.random.PCG64(3))
    r = rng.normal(0, 0.01, size=50)
    history = tuple(
        np.append(w := rng.dirichlet(np.ones(4)) * 0.9, 1.0 - w.sum())
        for _ in range(50)
    )
    adjusted = apply_costs(r, history, cost_bp=0.0)
    assert np.array_equal(adjusted, r)


def test_cost_model_validation():
    with pytest.raises(ConfigError):
        CostModel(-1.0)
    with pytest.raises(ContractError):
        apply_costs(np.array([0.01]), (), cost_bp=5.0)


def test_sharpe_non_increasing_over_cost_grid():
    rng = np.random.Generator(np.random.PCG64(17))
    for trial in range(5):
        r = rng.normal(0.0005, 0.01, size=160)
        history = []
        w = np.array([0.0, 0.0, 0.0, 1.0])
        for _ in range(160):
            risky = rng.dirichlet(np.ones(3)) * 0.9
            w = np.append(risky, 0.1)
            history.append(w)
        sharpes = []
        for bp in (0.0, 5.0, 10.0, 20.0):
            adjusted = apply_costs(r, tuple(history), bp)
            sharpes.append(compute_metrics(adjusted).sharpe)
        assert all(a >= b - 1e-12 for a, b in zip(sharpes, sharpes[1:]))


# --------------------------------------------------------------- metrics


def test_metrics_zero_mean_alternating_series():
    r = np.array([0.01, -0.01] * 40)
    report = compute_metrics(r)
    assert report.sharpe == 0.0
    assert report.win_rate == 0.5


def test_max_drawdown_peak_trough_example():
    # Equity path 1 -> 1.1 -> 0.99 -> 1.2; trough 0.99 against peak 1.1.
    r = np.array([0.1, 0.99 / 1.1 - 1.0, 1.2 / 0.99 - 1.0])
    report = compute_metrics(r)
    assert math.isclose(report.max_dd_pct, -10.0, rel_tol=0, abs_tol=1e-9)
    # Exhaustive peak/trough oracle over all index pairs.
    equity = np.concatenate([[1.0], np.cumprod(1 + r)])
    exhaustive = min(
        equity[j] / equity[i] - 1.0
        for i in range(len(equity))
        for j in range(i, len(equity))
    )
    assert math.isclose(max_drawdown(r), exhaustive, rel_tol=0, abs_tol=1e-15)


def test_metrics_undefined_flags_on_degenerate_series():
    report = compute_metrics(np.zeros(10))
    assert report.sharpe is None
    assert report.sortino is None
    assert report.calmar is None
    assert report.tail_ratio is None
    assert set(report.undefined) == {"sharpe", "sortino", "calmar", "tail_ratio"}
    assert report.return_pct == 0.0
    assert report.win_rate == 0.0
    doc = report.to_dict()
    assert doc["sharpe"] is None and "undefined" in doc


def test_metrics_require_two_bars_and_finite_inputs():
    with pytest.raises(ContractError):
        compute_metrics(np.array([0.01]))
    with pytest.raises(ContractError):
        compute_metrics(np.array([0.01, np.nan]))
    with pytest.raises(ContractError):
        compute_metrics(np.array([0.01, -1.0]))


def test_metrics_match_direct_formula_oracle_on_random_series():
    rng = np.random.Generator(np.random.PCG64(99))
    for _ in range(1000):
        n = int(rng.integers(10, 240))
        r = rng.normal(rng.uniform(-0.002, 0.002), rng.uniform(0.002, 0.03), size=n)
        r = np.clip(r, -0.5, None)
        report = compute_metrics(r)
        oracle = oracle_metrics(r)
        for name, want in oracle.items():
            assert_close(getattr(report, name), want, rel=1e-9)
        assert report.max_dd_pct <= 0.0
        assert 0.0 <= report.win_rate <= 1.0
        if report.tail_ratio is not None:
            assert report.tail_ratio >= 0.0


def test_price_series_validation_and_slice():
    cfg = SynthConfig(("AAA",), (RegimeSegment("bull", 10, 0.001, 0.01),))
    series = synth_generate(cfg, seed=3)
    window = series.slice(2, 6)
    assert window.n_bars == 4
    assert np.array_equal(window.close, series.close[2:6])
    with pytest.raises(ContractError):
        series.slice(5, 5)
    with pytest.raises(ConfigError):
        series.closes("ZZZ")
    with pytest.raises(DataError):
        PriceSeries(
            ("AAA",),
            series.timestamps[:2],
            series.open[:2],
            series.high[:2],
            series.low[:2],
            -series.close[:2],
            series.volume[:2],
        )

"""Tests for the 12-tool finance registry."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from evoagent.errors import ConfigError, ContractError
from evoagent.market import PriceSeries, _bar_timestamps
from evoagent.toolkit import (
    HitStats,
    TOOL_NAMES,
    ToolOutput,
    ToolRegistry,
    compute_correlations,
    compute_momentum,
    compute_quant_risk,
    compute_technicals,
    ema,
    record_hit,
    run_dcf_model,
    run_tool,
    score_composite_signal,
    score_risk,
    wilder_rsi,
)

PARAMS = ToolRegistry().params


def series_from_closes(closes_by_ticker: dict) -> PriceSeries:
    tickers = tuple(closes_by_ticker)
    closes = np.column_stack([np.asarray(closes_by_ticker[t], dtype=float) for t in tickers])
    n = closes.shape[0]
    opens = np.vstack([closes[:1], closes[:-1]])
    high = np.maximum(opens, closes) * 1.001
    low = np.minimum(opens, closes) * 0.999
    volume = np.full_like(closes, 1000.0)
    return PriceSeries(tickers, _bar_timestamps("2024-01-02", n), opens, high, low, closes, volume)


def trending_series(n=40, rate=0.002, start=100.0) -> PriceSeries:
    closes = start * np.exp(rate * np.arange(n))
    return series_from_closes({"AAA": closes})


# -------------------------------------------------------------- dispatch


def test_registry_exposes_twelve_unique_tools():
    assert len(TOOL_NAMES) == 12
    assert len(set(TOOL_NAMES)) == 12


def test_run_tool_rejects_unknown_tool_and_params():
    reg = ToolRegistry()
    series = trending_series()
    with pytest.raises(ConfigError):
        run_tool(reg, "get_sentiment", "AAA", series)
    with pytest.raises(ConfigError):
        run_tool(reg, "compute_technicals", "AAA", series, params={"rsi_len": 10})
    with pytest.raises(ConfigError):
        ToolRegistry(params={"bogus": 1})


def test_run_tool_is_deterministic():
    reg = ToolRegistry()
    series = trending_series()
    for name in TOOL_NAMES:
        a = run_tool(reg, name, "AAA", series)
        b = run_tool(reg, name, "AAA", series)
        assert a == b, name


def test_price_history_echoes_raw_window():
    series = trending_series(n=50)
    out = run_tool(ToolRegistry(), "get_price_history", "AAA", series)
    assert out.signal == 0.0 and out.confidence == 1.0
    assert out.fields["latest_close"] == float(series.closes("AAA")[-1])
    assert out.fields["window_high"] == float(np.max(series.high))
    assert out.fields["window_low"] == float(np.min(series.low))
    assert out.fields["n_bars"] == 50


def test_file_backed_tools_fall_back_to_neutral():
    series = trending_series()
    reg = ToolRegistry(data_dir=None)
    for name in ("get_fundamentals", "get_analyst_data", "get_options_data", "get_earnings_data"):
        out = run_tool(reg, name, "AAA", series)
        assert out.signal == 0.0
        assert out.confidence == 0.0
        assert "warning" in out.fields


def test_file_backed_tools_read_ticker_documents(tmp_path):
    doc = {
        "fundamentals": {"signal": 0.6, "confidence": 0.8, "pe_ratio": 18.2, "fair_value": 120.0},
        "analyst": {"signal": -0.4, "target_price": 95.0},
    }
    (tmp_path / "AAA.json").write_text(json.dumps(doc))
    reg = ToolRegistry(data_dir=str(tmp_path))
    series = trending_series()
    fund = run_tool(reg, "get_fundamentals", "AAA", series)
    assert fund.signal == 0.6 and fund.confidence == 0.8
    assert fund.fields["pe_ratio"] == 18.2
    analyst = run_tool(reg, "get_analyst_data", "AAA", series)
    assert analyst.signal == -0.4 and analyst.confidence == 0.5
    # Sections not present still fall back.
    assert run_tool(reg, "get_options_data", "AAA", series).confidence == 0.0


def test_tool_output_validation():
    with pytest.raises(ContractError):
        ToolOutput("x", 1.5, 0.5, {})
    with pytest.raises(ContractError):
        ToolOutput("x", 0.0, -0.1, {})


# ------------------------------------------------------------ technicals


def test_rsi_is_100_on_strictly_increasing_closes():
    series = trending_series(n=30)
    out = compute_technicals("AAA", series, PARAMS)
    assert out.fields["rsi"] == 100.0
    assert out.signal > 0


def test_constant_closes_give_neutral_technicals():
    series = series_from_closes({"AAA": np.full(30, 50.0)})
    out = compute_technicals("AAA", series, PARAMS)
    assert out.fields["rsi"] == 50.0
    assert out.fields["bollinger_upper"] == out.fields["bollinger_lower"]
    assert out.signal == 0.0


def test_wilder_rsi_matches_independent_recursion():
    rng = np.random.Generator(np.random.PCG64(8))
    for _ in range(50):
        closes = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.01, size=60)))
        period = 14
        # Spreadsheet-style oracle: explicit running Wilder averages.
        gains, losses = [], []
        for prev, cur in zip(closes, closes[1:]):
            change = cur - prev
            gains.append(max(change, 0.0))
            losses.append(max(-change, 0.0))
        ag = sum(gains[:period]) / period
        al = sum(losses[:period]) / period
        for g, l in zip(gains[period:], losses[period:]):
            ag = (ag * (period - 1) + g) / period
            al = (al * (period - 1) + l) / period
        expected = 100.0 - 100.0 / (1.0 + ag / al)
        assert abs(wilder_rsi(closes, period) - expected) < 1e-9
        assert 0.0 <= wilder_rsi(closes, period) <= 100.0


def test_bollinger_band_ordering_and_macd_fields():
    rng = np.random.Generator(np.random.PCG64(12))
    closes = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.02, size=60)))
    out = compute_technicals("AAA", series_from_closes({"AAA": closes}), PARAMS)
    f = out.fields
    assert f["bollinger_lower"] <= f["bollinger_middle"] <= f["bollinger_upper"]
    assert math.isclose(f["macd_histogram"], f["macd"] - f["macd_signal"], rel_tol=1e-12)
    # EMA seeds from the first value.
    assert ema(np.array([5.0, 5.0, 5.0]), 3).tolist() == [5.0, 5.0, 5.0]


def test_short_window_gives_neutral_technicals():
    series = trending_series(n=10)
    out = compute_technicals("AAA", series, PARAMS)
    assert out.signal == 0.0 and out.confidence == 0.0
    assert "warning" in out.fields


# -------------------------------------------------------------- momentum


def test_momentum_perfect_exponential_growth():
    series = trending_series(n=40, rate=0.002)
    out = compute_momentum("AAA", series, PARAMS)
    assert math.isclose(out.fields["trend_slope"], 0.002, rel_tol=0, abs_tol=1e-12)
    assert math.isclose(out.fields["trend_strength"], 1.0, rel_tol=0, abs_tol=1e-9)
    assert out.signal > 0


def test_momentum_strictly_decreasing_series():
    series = trending_series(n=40, rate=-0.003)
    out = compute_momentum("AAA", series, PARAMS)
    for h in (5, 10, 20):
        assert out.fields[f"return_{h}"] < 0
    assert out.signal < 0


def test_momentum_white_noise_mean_signal_is_zero():
    rng = np.random.Generator(np.random.PCG64(77))
    signals = []
    for _ in range(1000):
        closes = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.01, size=25)))
        out = compute_momentum("AAA", series_from_closes({"AAA": closes}), PARAMS)
        signals.append(out.signal)
    mean = float(np.mean(signals))
    se = float(np.std(signals, ddof=1)) / math.sqrt(len(signals))
    assert abs(mean) <= 3 * se


def test_momentum_short_window_neutral():
    out = compute_momentum("AAA", trending_series(n=12), PARAMS)
    assert out.signal == 0.0 and out.confidence == 0.0


# ------------------------------------------------------------ quant risk


def test_quant_risk_zero_volatility_series():
    series = series_from_closes({"AAA": np.full(30, 80.0)})
    out = compute_quant_risk("AAA", series, PARAMS)
    f = out.fields
    assert f["volatility"] == 0.0
    assert f["max_drawdown"] == 0.0
    assert f["var_95"] == 0.0
    assert out.signal == 0.0


def test_var95_single_tail_loss_oracle():
    # 20 returns: one -2% loss, nineteen +1% gains; k = floor(0.05*20) = 1.
    returns = np.array([-0.02] + [0.01] * 19)
    closes = 100.0 * np.cumprod(np.concatenate([[1.0], 1.0 + returns]))
    out = compute_quant_risk("AAA", series_from_closes({"AAA": closes}), PARAMS)
    assert math.isclose(out.fields["var_95"], 0.02, rel_tol=0, abs_tol=1e-12)
    assert math.isclose(out.fields["cvar_95"], 0.02, rel_tol=0, abs_tol=1e-12)


def test_var_cvar_order_statistics_oracle():
    rng = np.random.Generator(np.random.PCG64(5))
    for _ in range(50):
        n = int(rng.integers(21, 120))
        r = rng.normal(0, 0.02, size=n)
        closes = 100.0 * np.cumprod(np.concatenate([[1.0], 1.0 + r]))
        out = compute_quant_risk("AAA", series_from_closes({"AAA": closes}), PARAMS)
        k = max(1, math.floor(0.05 * n))
        worst = sorted(r)[:k]
        assert math.isclose(out.fields["var_95"], max(0.0, -worst[-1]), abs_tol=1e-12)
        assert math.isclose(out.fields["cvar_95"], max(0.0, -sum(worst) / k), abs_tol=1e-12)


def test_beta_of_index_against_itself_is_one():
    rng = np.random.Generator(np.random.PCG64(6))
    closes = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.01, size=40)))
    out = compute_quant_risk("AAA", series_from_closes({"AAA": closes}), PARAMS)
    assert math.isclose(out.fields["beta"], 1.0, rel_tol=0, abs_tol=1e-9)


# ---------------------------------------------------------- correlations


def test_correlation_identity_and_antisymmetry():
    rng = np.random.Generator(np.random.PCG64(4))
    r = rng.normal(0, 0.01, size=30)
    up = 100.0 * np.cumprod(1.0 + np.concatenate([[0.0], r]))
    down = 100.0 * np.cumprod(1.0 - np.concatenate([[0.0], r]))
    series = series_from_closes({"AAA": up, "BBB": down})
    out = compute_correlations(series, "AAA")
    matrix = np.array(out.fields["matrix"])
    assert matrix[0, 0] == 1.0 and matrix[1, 1] == 1.0
    assert math.isclose(matrix[0, 1], -1.0, rel_tol=0, abs_tol=1e-12)
    assert np.array_equal(matrix, matrix.T)


def test_correlations_match_covariance_formula_oracle():
    rng = np.random.Generator(np.random.PCG64(44))
    for _ in range(30):
        closes = {
            name: 100.0 * np.exp(np.cumsum(rng.normal(0, 0.02, size=25)))
            for name in ("AAA", "BBB", "CCC")
        }
        series = series_from_closes(closes)
        matrix = np.array(compute_correlations(series, "AAA").fields["matrix"])
        returns = series.bar_returns()
        for i in range(3):
            for j in range(3):
                x, y = returns[:, i], returns[:, j]
                cov = float(np.mean((x - x.mean()) * (y - y.mean())))
                denom = math.sqrt(float(np.mean((x - x.mean()) ** 2)) * float(np.mean((y - y.mean()) ** 2)))
                assert abs(matrix[i, j] - cov / denom) < 1e-10
                assert -1.0 <= matrix[i, j] <= 1.0


def test_correlation_zero_variance_defined_as_zero():
    series = series_from_closes({"AAA": np.full(15, 10.0), "BBB": np.linspace(10, 12, 15)})
    out = compute_correlations(series, "AAA")
    matrix = np.array(out.fields["matrix"])
    assert matrix[0, 1] == 0.0


def test_correlations_short_window_neutral():
    series = trending_series(n=5)
    out = compute_correlations(series, "AAA")
    assert out.confidence == 0.0


# --------------------------------------------------------------- analysis


def test_dcf_signal_is_antitone_in_price(tmp_path):
    (tmp_path / "AAA.json").write_text(json.dumps({"fundamentals": {"fair_value": 110.0}}))
    reg = ToolRegistry(data_dir=str(tmp_path))
    low = series_from_closes({"AAA": np.linspace(100, 100, 30)})
    high = series_from_closes({"AAA": np.linspace(100, 130, 30)})
    sig_low = run_dcf_model(reg, "AAA", low, PARAMS).signal
    sig_high = run_dcf_model(reg, "AAA", high, PARAMS).signal
    assert sig_low > sig_high
    out = run_dcf_model(reg, "AAA", low, PARAMS)
    assert out.fields["fair_value"] == 110.0
    assert out.fields["scenario_bull"] > out.fields["scenario_base"] > out.fields["scenario_bear"]


def test_dcf_without_fundamentals_uses_trailing_mean():
    reg = ToolRegistry()
    series = series_from_closes({"AAA": np.full(30, 100.0)})
    out = run_dcf_model(reg, "AAA", series, PARAMS)
    assert math.isclose(out.fields["fair_value"], 105.0, rel_tol=1e-12)
    # 5% upside over a 20% scale -> signal 0.25.
    assert math.isclose(out.signal, 0.25, rel_tol=1e-12)


def test_score_risk_sub_scores_stay_on_rating_scale():
    rng = np.random.Generator(np.random.PCG64(31))
    reg = ToolRegistry()
    for _ in range(20):
        closes = 100.0 * np.exp(np.cumsum(rng.normal(0, 0.02, size=45)))
        out = score_risk(reg, "AAA", series_from_closes({"AAA": closes}), PARAMS)
        for key in ("valuation_risk", "financial_risk", "growth_risk", "macro_risk", "technical_risk", "overall_risk"):
            assert 1.0 <= out.fields[key] <= 10.0, key
        assert -1.0 <= out.signal <= 1.0


def test_composite_unanimous_buy():
    outputs = [ToolOutput(f"t{i}", 1.0, 1.0, {}) for i in range(3)]
    out = score_composite_signal(outputs)
    assert out.signal == 1.0
    assert out.fields["label"] == "BUY"


def test_composite_balanced_pair_holds():
    outputs = [ToolOutput("a", 1.0, 0.7, {}), ToolOutput("b", -1.0, 0.7, {})]
    out = score_composite_signal(outputs)
    assert out.signal == 0.0
    assert out.fields["label"] == "HOLD"


def test_composite_matches_weighted_mean_oracle():
    rng = np.random.Generator(np.random.PCG64(14))
    for _ in range(100):
        outputs = [
            ToolOutput(f"t{i}", float(rng.uniform(-1, 1)), float(rng.uniform(0.01, 1)), {})
            for i in range(int(rng.integers(1, 8)))
        ]
        expected = sum(o.signal * o.confidence for o in outputs) / sum(
            o.confidence for o in outputs
        )
        got = score_composite_signal(outputs).signal
        assert abs(got - float(np.clip(expected, -1, 1))) < 1e-12


def test_composite_validation_and_labels():
    with pytest.raises(ContractError):
        score_composite_signal([])
    with pytest.raises(ConfigError):
        score_composite_signal([ToolOutput("a", 0.0, 1.0, {})], buy_threshold=-0.5, sell_threshold=0.5)
    sell = score_composite_signal([ToolOutput("a", -0.9, 1.0, {})])
    assert sell.fields["label"] == "SELL"
    zero_conf = score_composite_signal([ToolOutput("a", 1.0, 0.0, {})])
    assert zero_conf.signal == 0.0


# ----------------------------------------------------------- hit stats


def test_record_hit_sign_agreement():
    stats = HitStats()
    record_hit(stats, "compute_momentum", "AAA", 0.5, 0.01)
    e = stats.counts[("compute_momentum", "AAA")]
    assert e == {"correct": 1, "incorrect": 0, "total": 1}


def test_record_hit_sign_disagreement_and_abstention():
    stats = HitStats()
    record_hit(stats, "t", "AAA", 0.5, -0.01)
    record_hit(stats, "t", "AAA", 0.0, 0.02)
    record_hit(stats, "t", "AAA", -0.3, 0.0)
    e = stats.counts[("t", "AAA")]
    assert e == {"correct": 0, "incorrect": 1, "total": 3}
    assert e["correct"] + e["incorrect"] <= e["total"]
    assert stats.hit_rate("t", "AAA") == 0.0
    assert stats.hit_rate("t", "ZZZ") is None


def test_hit_rate_accumulates():
    stats = HitStats()
    for _ in range(3):
        record_hit(stats, "t", "AAA", 1.0, 0.01)
    record_hit(stats, "t", "AAA", 1.0, -0.01)
    assert stats.hit_rate("t", "AAA") == 0.75

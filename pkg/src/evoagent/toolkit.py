"""The 12-tool finance registry.

Five data-retrieval tools (price history from the OHLCV cache; fundamentals,
analyst, options, and earnings from optional per-ticker JSON files with
neutral fallbacks), four computation tools implemented exactly from cached
bars, and three analysis tools that fuse them.

Every tool returns a ToolOutput with a directional signal in [-1, 1]
(bullish positive), a confidence in [0, 1], and a map of named fields.
Outputs are pure functions of (tool, ticker, data window, params): repeated
calls are byte-identical.

Fixed conventions the formulas rely on:

* RSI-14 with Wilder smoothing; zero-movement series defines RSI = 50.
* MACD 12/26 with a 9-bar signal line; EMAs seed from the first close.
* Bollinger 20-period, +-2 population standard deviations.
* Momentum horizons {5, 10, 20} bars; each horizon return is normalized by
  1% per bar before averaging into the signal.
* VaR/CVaR at 95% use the k = max(1, floor(0.05 n)) worst order statistics.
* Data-file schema: one JSON object per ticker with optional sections
  "fundamentals", "analyst", "options", "earnings"; each section carries a
  "signal" in [-1, 1], an optional "confidence" (default 0.5), and any
  extra fields, all echoed into the ToolOutput.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .market import PriceSeries, max_drawdown

logger = logging.getLogger(__name__)

DATA_TOOLS = (
    "get_price_history",
    "get_fundamentals",
    "get_analyst_data",
    "get_options_data",
    "get_earnings_data",
)
COMPUTE_TOOLS = (
    "compute_technicals",
    "compute_quant_risk",
    "compute_momentum",
    "compute_correlations",
)
ANALYSIS_TOOLS = (
    "run_dcf_model",
    "score_risk",
    "score_composite_signal",
)
TOOL_NAMES = DATA_TOOLS + COMPUTE_TOOLS + ANALYSIS_TOOLS

_FILE_SECTIONS = {
    "get_fundamentals": "fundamentals",
    "get_analyst_data": "analyst",
    "get_options_data": "options",
    "get_earnings_data": "earnings",
}

DEFAULT_PARAMS = {
    "rsi_period": 14,
    "macd_fast": 12,
    "macd_slow": 26,
    "macd_signal": 9,
    "bollinger_period": 20,
    "bollinger_k": 2.0,
    "momentum_horizons": (5, 10, 20),
    "var_level": 0.95,
    "buy_threshold": 0.2,
    "sell_threshold": -0.2,
    "dcf_growth_factor": 1.05,
    "dcf_upside_scale": 0.2,
}


@dataclass(frozen=True)
class ToolOutput:
    """One tool invocation's directional signal plus named fields."""

    tool_name: str
    signal: float
    confidence: float
    fields: dict

    def __post_init__(self) -> None:
        if not (-1.0 <= self.signal <= 1.0) or not math.isfinite(self.signal):
            raise ContractError(f"signal must lie in [-1, 1], got {self.signal}")
        if not (0.0 <= self.confidence <= 1.0) or not math.isfinite(self.confidence):
            raise ContractError(f"confidence must lie in [0, 1], got {self.confidence}")


def _neutral(tool_name: str, reason: str) -> ToolOutput:
    logger.warning("%s returned neutral output: %s", tool_name, reason)
    return ToolOutput(tool_name, 0.0, 0.0, {"warning": reason})


def _clip1(x: float) -> float:
    return float(np.clip(x, -1.0, 1.0))


# ------------------------------------------------------------- indicators


def wilder_rsi(closes: np.ndarray, period: int = 14) -> float:
    """RSI with Wilder smoothing; a zero-movement series is defined as 50."""
    c = np.asarray(closes, dtype=float)
    if c.size < period + 1:
        raise ContractError(f"RSI-{period} needs {period + 1} closes, got {c.size}")
    deltas = np.diff(c)
    gains = np.maximum(deltas, 0.0)
    losses = np.maximum(-deltas, 0.0)
    avg_gain = float(np.mean(gains[:period]))
    avg_loss = float(np.mean(losses[:period]))
    for g, l in zip(gains[period:], losses[period:]):
        avg_gain = (avg_gain * (period - 1) + g) / period
        avg_loss = (avg_loss * (period - 1) + l) / period
    if avg_gain == 0.0 and avg_loss == 0.0:
        return 50.0
    if avg_loss == 0.0:
        return 100.0
    return 100.0 - 100.0 / (1.0 + avg_gain / avg_loss)


def ema(values: np.ndarray, period: int) -> np.ndarray:
    """Exponential moving average, alpha = 2/(period+1), seeded at values[0]."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ContractError("EMA needs at least one value")
    alpha = 2.0 / (period + 1.0)
    out = np.empty_like(v)
    out[0] = v[0]
    for i in range(1, v.size):
        out[i] = alpha * v[i] + (1.0 - alpha) * out[i - 1]
    return out


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation; zero-variance inputs define it as 0."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xd = x - x.mean()
    yd = y - y.mean()
    denom = math.sqrt(float(xd @ xd) * float(yd @ yd))
    if denom == 0.0:
        logger.warning("zero-variance series in correlation, defined as 0")
        return 0.0
    return float((xd @ yd) / denom)


# ------------------------------------------------------------- registry


@dataclass
class ToolRegistry:
    """Fixed set of 12 named tools plus per-tool parameter defaults.

    data_dir, when set, points at one optional JSON document per ticker
    (``<data_dir>/<ticker>.json``) feeding the four file-backed tools.
    """

    data_dir: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = set(self.params) - set(DEFAULT_PARAMS)
        if unknown:
            raise ConfigError(f"unknown tool parameters: {sorted(unknown)}")
        merged = dict(DEFAULT_PARAMS)
        merged.update(self.params)
        self.params = merged
        self._file_cache: dict[str, dict | None] = {}

    @property
    def tool_names(self) -> tuple[str, ...]:
        return TOOL_NAMES

    def ticker_file(self, ticker: str) -> dict | None:
        if ticker in self._file_cache:
            return self._file_cache[ticker]
        doc = None
        if self.data_dir is not None:
            path = os.path.join(self.data_dir, f"{ticker}.json")
            if os.path.exists(path):
                with open(path) as handle:
                    doc = json.load(handle)
        self._file_cache[ticker] = doc
        return doc


def run_tool(
    registry: ToolRegistry,
    tool_name: str,
    ticker: str,
    window: PriceSeries,
    params: dict | None = None,
) -> ToolOutput:
    """Dispatch one tool against the data window ending at decision time."""
    if tool_name not in TOOL_NAMES:
        raise ConfigError(f"unknown tool {tool_name!r}")
    p = dict(registry.params)
    if params:
        unknown = set(params) - set(DEFAULT_PARAMS)
        if unknown:
            raise ConfigError(f"unknown tool parameters: {sorted(unknown)}")
        p.update(params)
    if tool_name == "get_price_history":
        return get_price_history(ticker, window)
    if tool_name in _FILE_SECTIONS:
        return _file_backed(registry, tool_name, ticker)
    if tool_name == "compute_technicals":
        return compute_technicals(ticker, window, p)
    if tool_name == "compute_momentum":
        return compute_momentum(ticker, window, p)
    if tool_name == "compute_quant_risk":
        return compute_quant_risk(ticker, window, p)
    if tool_name == "compute_correlations":
        return compute_correlations(window, ticker)
    if tool_name == "run_dcf_model":
        return run_dcf_model(registry, ticker, window, p)
    if tool_name == "score_risk":
        return score_risk(registry, ticker, window, p)
    return score_composite_signal_for(registry, ticker, window, p)


# ----------------------------------------------------------- data tools


def get_price_history(ticker: str, window: PriceSeries) -> ToolOutput:
    closes = window.closes(ticker)
    idx = window.ticker_index(ticker)
    return ToolOutput(
        "get_price_history",
        0.0,  # raw data carries no direction; abstains from hit/miss
        1.0,
        {
            "latest_close": float(closes[-1]),
            "window_high": float(np.max(window.high[:, idx])),
            "window_low": float(np.min(window.low[:, idx])),
            "latest_volume": float(window.volume[-1, idx]),
            "mean_volume": float(np.mean(window.volume[:, idx])),
            "n_bars": int(window.n_bars),
        },
    )


def _file_backed(registry: ToolRegistry, tool_name: str, ticker: str) -> ToolOutput:
    section_name = _FILE_SECTIONS[tool_name]
    doc = registry.ticker_file(ticker)
    section = (doc or {}).get(section_name)
    if not section:
        return _neutral(tool_name, f"no {section_name} data for {ticker}")
    fields = {k: v for k, v in section.items() if k not in ("signal", "confidence")}
    signal = float(section.get("signal", 0.0))
    confidence = float(section.get("confidence", 0.5))
    return ToolOutput(tool_name, _clip1(signal), float(np.clip(confidence, 0.0, 1.0)), fields)


# -------------------------------------------------------- compute tools


def compute_technicals(ticker: str, window: PriceSeries, params: dict) -> ToolOutput:
    """RSI, MACD, Bollinger bands, moving averages, and the technical score."""
    need = max(params["macd_slow"], params["bollinger_period"], params["rsi_period"] + 1)
    closes = window.closes(ticker)
    if closes.size < need:
        return _neutral("compute_technicals", f"need {need} bars, got {closes.size}")
    last = float(closes[-1])
    rsi = wilder_rsi(closes, params["rsi_period"])
    macd_line = ema(closes, params["macd_fast"]) - ema(closes, params["macd_slow"])
    signal_line = ema(macd_line, params["macd_signal"])
    histogram = float(macd_line[-1] - signal_line[-1])
    n_boll = params["bollinger_period"]
    middle = float(np.mean(closes[-n_boll:]))
    sigma = float(np.std(closes[-n_boll:]))  # population std
    upper = middle + params["bollinger_k"] * sigma
    lower = middle - params["bollinger_k"] * sigma
    sma10 = float(np.mean(closes[-10:]))
    sma20 = float(np.mean(closes[-20:]))
    # Sub-signals, all trend-following so a monotone rally scores positive.
    rsi_sub = (rsi - 50.0) / 50.0
    macd_sub = _clip1(histogram / (0.01 * last))
    boll_sub = 0.0 if sigma == 0.0 else _clip1((last - middle) / (params["bollinger_k"] * sigma))
    ma_sub = _clip1((sma10 / sma20 - 1.0) / 0.02)
    score = float(np.mean([rsi_sub, macd_sub, boll_sub, ma_sub]))
    return ToolOutput(
        "compute_technicals",
        _clip1(score),
        0.5 + 0.5 * abs(_clip1(score)),
        {
            "rsi": rsi,
            "macd": float(macd_line[-1]),
            "macd_signal": float(signal_line[-1]),
            "macd_histogram": histogram,
            "bollinger_middle": middle,
            "bollinger_upper": upper,
            "bollinger_lower": lower,
            "sma_10": sma10,
            "sma_20": sma20,
            "support": float(np.min(closes)),
            "resistance": float(np.max(closes)),
            "technical_score": score,
        },
    )


def compute_momentum(ticker: str, window: PriceSeries, params: dict) -> ToolOutput:
    """Multi-horizon returns, log-linear trend slope and strength, volume trend."""
    horizons = tuple(params["momentum_horizons"])
    need = max(horizons)
    closes = window.closes(ticker)
    if closes.size < need:
        return _neutral("compute_momentum", f"need {need} bars, got {closes.size}")
    rets = {h: float(closes[-1] / closes[-h] - 1.0) for h in horizons}
    logc = np.log(closes)
    x = np.arange(logc.size, dtype=float)
    slope, intercept = np.polyfit(x, logc, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((logc - fitted) ** 2))
    ss_tot = float(np.sum((logc - logc.mean()) ** 2))
    r2 = 0.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    idx = window.ticker_index(ticker)
    vol = window.volume[:, idx]
    volume_trend = float(np.mean(vol[-5:]) / np.mean(vol[-20:]) - 1.0) if vol.size >= 20 else 0.0
    # Each horizon return normalized by 1% per bar, averaged, clipped.
    signal = _clip1(float(np.mean([rets[h] / (0.01 * h) for h in horizons])))
    return ToolOutput(
        "compute_momentum",
        signal,
        0.3 + 0.7 * max(0.0, min(1.0, r2)),
        {
            **{f"return_{h}": rets[h] for h in horizons},
            "trend_slope": float(slope),
            "trend_strength": r2,
            "trend_score": signal,
            "volume_trend": volume_trend,
        },
    )


def _var_cvar(returns: np.ndarray, level: float) -> tuple[float, float]:
    n = returns.size
    k = max(1, int(math.floor((1.0 - level) * n)))
    worst = np.sort(returns)[:k]
    var = max(0.0, -float(worst[-1]))
    cvar = max(0.0, -float(np.mean(worst)))
    return var, cvar


def compute_quant_risk(ticker: str, window: PriceSeries, params: dict) -> ToolOutput:
    """Realized vol, VaR/CVaR, Sharpe, Sortino, max drawdown, beta/alpha."""
    closes = window.closes(ticker)
    if closes.size < 20:
        return _neutral("compute_quant_risk", f"need 20 bars, got {closes.size}")
    r = closes[1:] / closes[:-1] - 1.0
    index_r = np.mean(window.bar_returns(), axis=1)
    vol = float(np.std(r, ddof=1))
    ann_vol = vol * math.sqrt(1008)
    var95, cvar95 = _var_cvar(r, params["var_level"])
    mean = float(np.mean(r))
    sharpe = 0.0 if vol == 0.0 else math.sqrt(1008) * mean / vol
    sigma_d = math.sqrt(float(np.mean(np.minimum(r, 0.0) ** 2)))
    sortino = 0.0 if sigma_d == 0.0 else math.sqrt(1008) * mean / sigma_d
    dd = max_drawdown(r)
    idx_var = float(np.var(index_r, ddof=1))
    if idx_var == 0.0:
        beta = 1.0 if np.array_equal(r, index_r) else 0.0
    else:
        cov = float(np.cov(r, index_r, ddof=1)[0, 1])
        beta = cov / idx_var
    alpha = mean - beta * float(np.mean(index_r))
    # Normalized riskiness in [0, 1]: 60% annualized vol, 3% VaR, or a 20%
    # drawdown each saturate their component.
    risk_norm = float(
        np.mean([min(ann_vol / 0.60, 1.0), min(var95 / 0.03, 1.0), min(abs(dd) / 0.20, 1.0)])
    )
    return ToolOutput(
        "compute_quant_risk",
        -risk_norm,  # high risk is bearish
        risk_norm,
        {
            "volatility": vol,
            "annualized_volatility": ann_vol,
            "var_95": var95,
            "cvar_95": cvar95,
            "sharpe": sharpe,
            "sortino": sortino,
            "max_drawdown": dd,
            "beta": beta,
            "alpha": alpha,
            "risk_norm": risk_norm,
        },
    )


def compute_correlations(window: PriceSeries, target: str) -> ToolOutput:
    """Pearson correlation matrix of per-bar returns plus rolling target corr."""
    if window.n_bars < 10:
        return _neutral("compute_correlations", f"need 10 bars, got {window.n_bars}")
    returns = window.bar_returns()
    m = len(window.tickers)
    matrix = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            c = _pearson(returns[:, i], returns[:, j])
            matrix[i, j] = matrix[j, i] = c
    t_idx = window.ticker_index(target)
    others = [i for i in range(m) if i != t_idx]
    if others:
        basket = np.mean(returns[:, others], axis=1)
        tail = min(10, returns.shape[0])
        rolling = _pearson(returns[-tail:, t_idx], basket[-tail:])
        mean_corr = float(np.mean(matrix[t_idx, others]))
    else:
        logger.warning("single-ticker universe: correlations degenerate")
        rolling = 0.0
        mean_corr = 0.0
    return ToolOutput(
        "compute_correlations",
        0.0,  # informational; no directional view
        0.5,
        {
            "tickers": list(window.tickers),
            "matrix": matrix.tolist(),
            "rolling_corr_to_basket": rolling,
            "mean_corr_to_others": mean_corr,
        },
    )


# ------------------------------------------------------- analysis tools


def run_dcf_model(
    registry: ToolRegistry, ticker: str, window: PriceSeries, params: dict
) -> ToolOutput:
    """Simplified implied-upside valuation signal with bull/base/bear scenarios.

    Fair value comes from the ticker's fundamentals file when it provides
    one, else trailing mean close times the configured growth factor. The
    signal is antitone in current price by construction.
    """
    closes = window.closes(ticker)
    price = float(closes[-1])
    doc = registry.ticker_file(ticker)
    fundamentals = (doc or {}).get("fundamentals") or {}
    if "fair_value" in fundamentals:
        fair = float(fundamentals["fair_value"])
        confidence = 0.7
    else:
        fair = float(np.mean(closes)) * params["dcf_growth_factor"]
        confidence = 0.4
    if fair <= 0:
        return _neutral("run_dcf_model", f"non-positive fair value {fair}")
    upside = fair / price - 1.0
    signal = _clip1(upside / params["dcf_upside_scale"])
    return ToolOutput(
        "run_dcf_model",
        signal,
        confidence,
        {
            "fair_value": fair,
            "price": price,
            "implied_upside": upside,
            "scenario_bull": fair * 1.15,
            "scenario_base": fair,
            "scenario_bear": fair * 0.85,
        },
    )


def _sub_score(risk01: float) -> float:
    """Map riskiness in [0, 1] onto the 1-10 rating scale."""
    return 1.0 + 9.0 * float(np.clip(risk01, 0.0, 1.0))


def score_risk(
    registry: ToolRegistry, ticker: str, window: PriceSeries, params: dict
) -> ToolOutput:
    """Overall 1-10 risk rating as the uniform mean of five sub-scores."""
    quant = compute_quant_risk(ticker, window, params)
    tech = compute_technicals(ticker, window, params)
    mom = compute_momentum(ticker, window, params)
    dcf = run_dcf_model(registry, ticker, window, params)
    if quant.confidence == 0.0 and quant.signal == 0.0 and "warning" in quant.fields:
        return _neutral("score_risk", "insufficient bars for risk sub-scores")
    rsi = tech.fields.get("rsi", 50.0)
    subs = {
        "valuation_risk": _sub_score((1.0 - dcf.signal) / 2.0),
        "financial_risk": _sub_score(quant.fields["annualized_volatility"] / 0.60),
        "growth_risk": _sub_score((1.0 - mom.signal) / 2.0),
        "macro_risk": _sub_score(abs(quant.fields["max_drawdown"]) / 0.20),
        "technical_risk": _sub_score(abs(rsi - 50.0) / 50.0),
    }
    overall = float(np.mean(list(subs.values())))
    signal = _clip1(-(overall - 5.5) / 4.5)  # high rating is bearish
    return ToolOutput(
        "score_risk",
        signal,
        0.6,
        {**subs, "overall_risk": overall},
    )


COMPOSITE_INPUTS = (
    "compute_technicals",
    "compute_momentum",
    "run_dcf_model",
    "get_analyst_data",
    "get_options_data",
    "score_risk",
)


def score_composite_signal(
    tool_outputs: list[ToolOutput],
    buy_threshold: float = 0.2,
    sell_threshold: float = -0.2,
) -> ToolOutput:
    """Confidence-weighted fusion with a BUY/SELL/HOLD label."""
    if not tool_outputs:
        raise ContractError("composite needs at least one constituent output")
    if sell_threshold >= buy_threshold:
        raise ConfigError("sell threshold must sit below buy threshold")
    total_conf = sum(o.confidence for o in tool_outputs)
    if total_conf == 0.0:
        signal = 0.0
    else:
        signal = sum(o.signal * o.confidence for o in tool_outputs) / total_conf
    if signal > buy_threshold:
        label = "BUY"
    elif signal < sell_threshold:
        label = "SELL"
    else:
        label = "HOLD"
    return ToolOutput(
        "score_composite_signal",
        _clip1(signal),
        float(np.mean([o.confidence for o in tool_outputs])),
        {
            "label": label,
            "constituents": [o.tool_name for o in tool_outputs],
        },
    )


def score_composite_signal_for(
    registry: ToolRegistry, ticker: str, window: PriceSeries, params: dict
) -> ToolOutput:
    outputs = [run_tool(registry, name, ticker, window, None) for name in COMPOSITE_INPUTS]
    return score_composite_signal(outputs, params["buy_threshold"], params["sell_threshold"])


# -------------------------------------------------------- hit accounting


@dataclass
class HitStats:
    """Per-(tool, ticker) directional hit/miss counts."""

    counts: dict = field(default_factory=dict)

    def entry(self, tool: str, ticker: str) -> dict:
        return self.counts.setdefault(
            (tool, ticker), {"correct": 0, "incorrect": 0, "total": 0}
        )

    def hit_rate(self, tool: str, ticker: str) -> float | None:
        e = self.counts.get((tool, ticker))
        if not e:
            return None
        decided = e["correct"] + e["incorrect"]
        return e["correct"] / decided if decided else None


def record_hit(
    stats: HitStats, tool: str, ticker: str, signal: float, realized_return: float
) -> HitStats:
    """Hit when signs agree, miss when they oppose; zeros only count exposure."""
    e = stats.entry(tool, ticker)
    e["total"] += 1
    if signal != 0.0 and realized_return != 0.0:
        if (signal > 0) == (realized_return > 0):
            e["correct"] += 1
        else:
            e["incorrect"] += 1
    return stats

"""Market environment and evaluation.

Covers OHLCV ingestion, synthetic regime-switching price generation, episode
stepping with portfolio returns, outcome-score mapping, proportional
transaction costs, and the seven-metric performance suite.

Conventions (documented because the formulas must be bit-reproducible):

* Bars are hourly, four per trading day, so annualization uses
  ``T_ANN = 252 * 4 = 1008``.
* Sharpe uses the sample (n-1) standard deviation.
* Calmar annualizes arithmetically: mean per-bar return times ``T_ANN``.
* Percentiles interpolate linearly between order statistics.
* The tail ratio is ``max(p95, 0) / |min(p5, 0)|`` and is undefined when the
  5th percentile is not a loss.
* Cash earns zero.
* ``return_pct`` and ``max_dd_pct`` are percentages; every other metric is a
  plain ratio.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta, timezone

import numpy as np

from .errors import ConfigError, ContractError, DataError

T_ANN = 252 * 4  # hourly bars, 4 per trading day

CSV_HEADER = ["timestamp", "ticker", "open", "high", "low", "close", "volume"]

BAR_HOURS = (14, 15, 16, 17)  # UTC bar stamps, 4 per trading day

METRIC_FIELDS = (
    "return_pct",
    "sharpe",
    "sortino",
    "calmar",
    "max_dd_pct",
    "win_rate",
    "tail_ratio",
)


def _parse_timestamp(raw: str, line: int) -> datetime:
    text = raw.strip().replace("Z", "+00:00")
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise DataError(f"line {line}: bad timestamp {raw!r}: {exc}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S+00:00")


@dataclass
class PriceSeries:
    """Aligned multi-ticker OHLCV grid of hourly bars."""

    tickers: tuple[str, ...]
    timestamps: tuple[datetime, ...]
    open: np.ndarray  # (n_bars, n_tickers)
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self) -> None:
        n, m = len(self.timestamps), len(self.tickers)
        if m == 0 or n == 0:
            raise DataError("series needs at least one ticker and one bar")
        if len(set(self.tickers)) != m:
            raise DataError(f"duplicate tickers: {self.tickers}")
        for name in ("open", "high", "low", "close", "volume"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.shape != (n, m):
                raise DataError(f"{name} has shape {arr.shape}, expected ({n}, {m})")
            if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise DataError(f"{name} must be strictly positive and finite")
        for prev, cur in zip(self.timestamps, self.timestamps[1:]):
            if cur <= prev:
                raise DataError(f"timestamps not strictly increasing at {cur}")

    @property
    def n_bars(self) -> int:
        return len(self.timestamps)

    def ticker_index(self, ticker: str) -> int:
        try:
            return self.tickers.index(ticker)
        except ValueError:
            raise ConfigError(f"unknown ticker {ticker!r}") from None

    def closes(self, ticker: str) -> np.ndarray:
        return self.close[:, self.ticker_index(ticker)]

    def bar_returns(self) -> np.ndarray:
        """Simple per-bar returns, shape (n_bars - 1, n_tickers)."""
        return self.close[1:] / self.close[:-1] - 1.0

    def slice(self, start: int, stop: int) -> "PriceSeries":
        if not (0 <= start < stop <= self.n_bars):
            raise ContractError(f"bad slice [{start}, {stop}) for {self.n_bars} bars")
        return PriceSeries(
            self.tickers,
            self.timestamps[start:stop],
            self.open[start:stop],
            self.high[start:stop],
            self.low[start:stop],
            self.close[start:stop],
            self.volume[start:stop],
        )


def load_csv(path: str) -> PriceSeries:
    """Parse and validate the aligned long-format OHLCV file.

    Rejects malformed rows (with the offending line number), duplicate
    (timestamp, ticker) pairs, misaligned ticker grids, and gaps of more
    than one trading day between consecutive bars.
    """
    rows: dict[datetime, dict[str, tuple[float, ...]]] = {}
    tickers: list[str] = []
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise DataError(f"bad header {header}, expected {CSV_HEADER}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 7:
                raise DataError(f"line {line}: expected 7 fields, got {len(row)}")
            ts = _parse_timestamp(row[0], line)
            ticker = row[1].strip()
            if not ticker:
                raise DataError(f"line {line}: empty ticker")
            try:
                values = tuple(float(v) for v in row[2:7])
            except ValueError as exc:
                raise DataError(f"line {line}: bad numeric field: {exc}") from None
            if any(not math.isfinite(v) or v <= 0 for v in values):
                raise DataError(f"line {line}: prices and volume must be positive")
            o, h, l, c, _ = values
            if not (l <= o <= h and l <= c <= h):
                raise DataError(f"line {line}: OHLC ordering violated")
            if ticker not in tickers:
                tickers.append(ticker)
            per_ts = rows.setdefault(ts, {})
            if ticker in per_ts:
                raise DataError(f"line {line}: duplicate bar for {ticker} at {row[0]}")
            per_ts[ticker] = values
    if not rows:
        raise DataError(f"{path} contains no data rows")
    stamps = sorted(rows)
    for ts in stamps:
        missing = set(tickers) - set(rows[ts])
        if missing:
            raise DataError(f"tickers {sorted(missing)} missing at {ts.isoformat()}")
    for prev, cur in zip(stamps, stamps[1:]):
        gap = np.busday_count(prev.date().isoformat(), cur.date().isoformat())
        if gap > 1:
            raise DataError(f"gap exceeding 1 trading day between {prev} and {cur}")
    order = sorted(tickers)
    grids = {
        name: np.array([[rows[ts][t][i] for t in order] for ts in stamps])
        for i, name in enumerate(("open", "high", "low", "close", "volume"))
    }
    return PriceSeries(tuple(order), tuple(stamps), **grids)


def write_csv(series: PriceSeries, path: str) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_HEADER)
        for bi, ts in enumerate(series.timestamps):
            for ti, ticker in enumerate(series.tickers):
                writer.writerow(
                    [
                        format_timestamp(ts),
                        ticker,
                        repr(float(series.open[bi, ti])),
                        repr(float(series.high[bi, ti])),
                        repr(float(series.low[bi, ti])),
                        repr(float(series.close[bi, ti])),
                        repr(float(series.volume[bi, ti])),
                    ]
                )


@dataclass
class RegimeSegment:
    """One stretch of bars governed by a single drift/vol pair."""

    regime: str
    bars: int
    drift: float  # per-bar log-return drift
    vol: float  # per-bar log-return standard deviation

    def __post_init__(self) -> None:
        if self.bars <= 0:
            raise ConfigError(f"segment needs >= 1 bar, got {self.bars}")
        if self.vol < 0:
            raise ConfigError(f"segment vol must be >= 0, got {self.vol}")


@dataclass
class SynthConfig:
    """Regime-switching geometric random-walk generator settings."""

    tickers: tuple[str, ...]
    segments: tuple[RegimeSegment, ...]
    start_price: float = 100.0
    start_date: str = "2024-01-02"
    ticker_drift: dict[str, float] = field(default_factory=dict)
    ticker_vol_scale: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tickers = tuple(self.tickers)
        self.segments = tuple(self.segments)
        if not self.tickers or len(set(self.tickers)) != len(self.tickers):
            raise ConfigError(f"tickers must be non-empty and unique: {self.tickers}")
        if not self.segments:
            raise ConfigError("at least one regime segment required")
        if self.start_price <= 0:
            raise ConfigError("start price must be positive")
        for name in set(self.ticker_drift) | set(self.ticker_vol_scale):
            if name not in self.tickers:
                raise ConfigError(f"per-ticker override for unknown ticker {name!r}")

    @property
    def n_bars(self) -> int:
        return sum(s.bars for s in self.segments)

    def regime_labels(self) -> list[str]:
        labels: list[str] = []
        for seg in self.segments:
            labels.extend([seg.regime] * seg.bars)
        return labels


def _bar_timestamps(start_date: str, n_bars: int) -> tuple[datetime, ...]:
    stamps: list[datetime] = []
    day = np.datetime64(start_date, "D")
    if not np.is_busday(day):
        day = np.busday_offset(day, 0, roll="forward")
    while len(stamps) < n_bars:
        d = day.astype(date)
        for hour in BAR_HOURS:
            stamps.append(datetime.combine(d, time(hour), tzinfo=timezone.utc))
            if len(stamps) == n_bars:
                break
        day = np.busday_offset(day, 1, roll="forward")
    return tuple(stamps)


def synth_generate(config: SynthConfig, seed: int) -> PriceSeries:
    """Geometric random-walk closes per regime segment, deterministic per seed."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    n, m = config.n_bars, len(config.tickers)
    drift_adj = np.array([config.ticker_drift.get(t, 0.0) for t in config.tickers])
    vol_scale = np.array([config.ticker_vol_scale.get(t, 1.0) for t in config.tickers])
    log_steps = np.empty((n, m))
    intrabar = np.empty((n, m))
    vol_noise = np.empty((n, m))
    row = 0
    for seg in config.segments:
        z = rng.standard_normal((seg.bars, m))
        log_steps[row : row + seg.bars] = (seg.drift + drift_adj) + seg.vol * vol_scale * z
        intrabar[row : row + seg.bars] = np.abs(rng.standard_normal((seg.bars, m))) * seg.vol * vol_scale
        vol_noise[row : row + seg.bars] = np.abs(rng.standard_normal((seg.bars, m)))
        row += seg.bars
    close = config.start_price * np.exp(np.cumsum(log_steps, axis=0))
    openp = np.vstack([np.full((1, m), config.start_price), close[:-1]])
    high = np.maximum(openp, close) * (1.0 + 0.5 * intrabar)
    low = np.minimum(openp, close) * (1.0 - np.minimum(0.5 * intrabar, 0.5))
    volume = np.round(1e6 * (1.0 + 0.3 * vol_noise))
    return PriceSeries(
        config.tickers,
        _bar_timestamps(config.start_date, n),
        openp,
        high,
        low,
        close,
        volume,
    )


# ------------------------------------------------------------- portfolio


@dataclass
class PortfolioState:
    """Simplex weights (cash last), equity curve, and per-bar weight history."""

    weights: np.ndarray
    equity: float = 1.0
    weight_history: tuple[np.ndarray, ...] = ()

    def __post_init__(self) -> None:
        self.weights = validate_weights(self.weights)
        if self.equity <= 0:
            raise ContractError(f"equity must stay positive, got {self.equity}")

    @classmethod
    def all_cash(cls, n_assets: int) -> "PortfolioState":
        w = np.zeros(n_assets + 1)
        w[-1] = 1.0
        return cls(w)


def validate_weights(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise ContractError("weights must be a 1-D vector of assets plus cash")
    if not np.all(np.isfinite(w)) or np.any(w < -1e-12):
        raise ContractError(f"weights must be non-negative and finite: {w}")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise ContractError(f"weights must sum to 1, got {w.sum()!r}")
    return np.clip(w, 0.0, None)


def step(
    state: PortfolioState, weights: np.ndarray, next_bar_returns: np.ndarray
) -> tuple[float, PortfolioState]:
    """Realize one bar: r = sum_i w_i r_i with cash earning zero."""
    w = validate_weights(weights)
    r_assets = np.asarray(next_bar_returns, dtype=float)
    if r_assets.shape != (w.size - 1,):
        raise ContractError(
            f"got {r_assets.size} asset returns for {w.size - 1} asset weights"
        )
    if not np.all(np.isfinite(r_assets)) or np.any(r_assets <= -1.0):
        raise ContractError("asset returns must be finite and > -1")
    r = float(w[:-1] @ r_assets)
    new_state = PortfolioState(
        weights=w,
        equity=state.equity * (1.0 + r),
        weight_history=state.weight_history + (w,),
    )
    return r, new_state


def outcome_score(portfolio_return: float, scale: float = 0.01) -> float:
    """Map a per-bar return onto [-1, 1]; +-scale saturates."""
    if scale <= 0:
        raise ConfigError(f"outcome scale must be positive, got {scale}")
    return float(np.clip(portfolio_return / scale, -1.0, 1.0))


@dataclass
class CostModel:
    """Proportional transaction cost in basis points per unit turnover."""

    cost_bp: float = 0.0

    def __post_init__(self) -> None:
        if self.cost_bp < 0:
            raise ConfigError(f"cost_bp must be >= 0, got {self.cost_bp}")


def apply_costs(
    returns: np.ndarray, weight_history: tuple[np.ndarray, ...], cost_bp: float
) -> np.ndarray:
    """Per-bar cost subtraction: r_adj = r - (bp / 1e4) * sum_i |w_i,t - w_i,t-1|.

    Turnover sums over risky-asset slots only (cash is the residual leg);
    the position before the first bar is all cash. cost_bp = 0 is the
    identity, bit-exactly.
    """
    model = CostModel(cost_bp)
    r = np.asarray(returns, dtype=float)
    if len(weight_history) != r.size:
        raise ContractError(
            f"{len(weight_history)} weight rows for {r.size} return bars"
        )
    if model.cost_bp == 0.0:
        return r.copy()
    rate = model.cost_bp / 1e4
    adjusted = np.empty_like(r)
    prev = np.zeros(weight_history[0].size - 1) if weight_history else None
    for t, w in enumerate(weight_history):
        turnover = float(np.abs(w[:-1] - prev).sum())
        adjusted[t] = r[t] - rate * turnover
        prev = w[:-1]
    return adjusted


# --------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    """Seven-metric suite; undefined metrics carry None plus a flag."""

    return_pct: float | None
    sharpe: float | None
    sortino: float | None
    calmar: float | None
    max_dd_pct: float | None
    win_rate: float | None
    tail_ratio: float | None
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        doc = {name: getattr(self, name) for name in METRIC_FIELDS}
        doc["undefined"] = list(self.undefined)
        return doc


def max_drawdown(returns: np.ndarray) -> float:
    """Deepest peak-to-trough equity decline (a non-positive decimal)."""
    equity = np.cumprod(1.0 + np.asarray(returns, dtype=float))
    peaks = np.maximum.accumulate(np.concatenate([[1.0], equity]))[1:]
    return float(np.min(equity / peaks - 1.0, initial=0.0))


def compute_metrics(returns: np.ndarray) -> MetricsReport:
    """The seven-metric report over a per-bar return series."""
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ContractError(f"need >= 2 bars to compute metrics, got {r.size}")
    if not np.all(np.isfinite(r)) or np.any(r <= -1.0):
        raise ContractError("returns must be finite and > -1")
    undefined: list[str] = []
    mean = float(np.mean(r))
    # a constant series has zero sample variance by definition; np.std can
    # leave ~1e-17 of float noise there, which would fake a defined sharpe
    std = 0.0 if np.max(r) == np.min(r) else float(np.std(r, ddof=1))
    if std == 0.0:
        sharpe = None
        undefined.append("sharpe")
    else:
        sharpe = math.sqrt(T_ANN) * mean / std
    sigma_d = math.sqrt(float(np.mean(np.minimum(r, 0.0) ** 2)))
    if sigma_d == 0.0:
        sortino = None
        undefined.append("sortino")
    else:
        sortino = math.sqrt(T_ANN) * mean / sigma_d
    dd = max_drawdown(r)
    if dd == 0.0:
        calmar = None
        undefined.append("calmar")
    else:
        calmar = (mean * T_ANN) / abs(dd)
    p5, p95 = (float(np.percentile(r, q)) for q in (5.0, 95.0))
    loss = abs(min(p5, 0.0))
    if loss == 0.0:
        tail_ratio = None
        undefined.append("tail_ratio")
    else:
        tail_ratio = max(p95, 0.0) / loss
    return MetricsReport(
        return_pct=float(np.prod(1.0 + r) - 1.0) * 100.0,
        sharpe=sharpe,
        sortino=sortino,
        calmar=calmar,
        max_dd_pct=dd * 100.0,
        win_rate=float(np.mean(r > 0.0)),
        tail_ratio=tail_ratio,
        undefined=tuple(undefined),
    )

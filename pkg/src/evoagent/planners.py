"""Planner families, the score-to-weights map, and non-LLM baselines.

The six built-in families are deterministic signal-fusion strategies over
per-ticker tool outputs; with a generative backend they would be prompt
templates encoding the same principles, but the deterministic realization
keeps every decision reproducible and testable.

Two learned channels modulate fusion weights:

* Retrieved memory entries whose ticker matches and that reference a tool
  scale that tool's fusion weight by (0.5 + mean entry quality), so tools
  with a strong track record on a ticker count more and unreliable ones
  count less.
* A reflection regime label of "bear" scales the risk tools' fusion weight
  by 1.5.

Scores become simplex allocations through a softmax over tickers scaled by
a risk budget; the remainder sits in cash.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .market import PriceSeries
from .memory import MemoryEntry
from .toolkit import ToolOutput

logger = logging.getLogger(__name__)

PLANNER_FAMILIES = (
    "sequential",
    "decompose",
    "adaptive",
    "cot_reasoning",
    "reflexion",
    "hypothesis_test",
)

BASELINE_KINDS = ("EqW", "Mom", "MinV", "InvM")

RISK_TOOLS = ("compute_quant_risk", "score_risk")

SIGNAL_GROUPS = {
    "momentum": ("compute_momentum", "compute_technicals"),
    "valuation": ("run_dcf_model", "get_fundamentals"),
    "sentiment": ("get_analyst_data", "get_options_data", "get_earnings_data"),
    "risk": RISK_TOOLS,
}
COT_STAGE_ORDER = ("momentum", "valuation", "sentiment", "risk")

QUICK_LOOK_TOOLS = ("compute_momentum", "compute_technicals")
ADAPTIVE_AMBIGUITY = 0.15
REFLEXION_CONFIDENCE = 0.5
COT_DISAGREE_DAMP = 0.75

DEFAULT_TEMPERATURE = 0.5
DEFAULT_RISK_BUDGET = 0.9

BEAR_RISK_SCALE = 1.5


@dataclass(frozen=True)
class Planner:
    """A fusion strategy: one of the six families or an evolved template."""

    family: str
    params: dict = field(default_factory=dict)
    strategy_hints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.family not in PLANNER_FAMILIES and not self.family.startswith("evolved_"):
            raise ConfigError(f"unknown planner family {self.family!r}")


def default_planners() -> list[Planner]:
    return [Planner(family) for family in PLANNER_FAMILIES]


def evolved_momentum_reversal(planner_id: str = "evolved_momentum_reversal",
                              damp: float = 0.5) -> Planner:
    """Template for evolved planners: damp tickers whose momentum flipped."""
    if not planner_id.startswith("evolved_"):
        raise ConfigError("evolved planner ids must start with 'evolved_'")
    if not (0.0 <= damp <= 1.0):
        raise ConfigError(f"damp must lie in [0, 1], got {damp}")
    return Planner(planner_id, params={"damp": damp})


@dataclass(frozen=True)
class PlannerContext:
    """Everything a planner may consult for one decision."""

    tool_outputs: dict  # ticker -> tool name -> ToolOutput
    retrieved_memory: str = ""
    memory_entries: tuple[MemoryEntry, ...] = ()
    reflection_insight: str | None = None
    regime: str | None = None
    procedural_rules: tuple[str, ...] = ()
    prev_momentum: dict | None = None
    tool_weight_overrides: dict | None = None  # tool -> multiplier, all tickers

    def __post_init__(self) -> None:
        if not self.tool_outputs:
            raise ContractError("planner context needs tool outputs for at least one ticker")


@dataclass(frozen=True)
class AllocationDecision:
    """Non-negative ticker weights summing to <= 1; cash absorbs the rest."""

    weights: dict
    per_ticker_scores: dict

    def __post_init__(self) -> None:
        total = 0.0
        for ticker, w in self.weights.items():
            if not math.isfinite(w) or w < -1e-12:
                raise ContractError(f"weight for {ticker} must be >= 0, got {w}")
            total += w
        if total > 1.0 + 1e-9:
            raise ContractError(f"ticker weights sum to {total} > 1")

    @property
    def cash(self) -> float:
        return max(0.0, 1.0 - sum(self.weights.values()))

    def to_vector(self, tickers: tuple[str, ...]) -> np.ndarray:
        """Asset weights in the given ticker order with cash appended."""
        missing = set(self.weights) - set(tickers)
        if missing:
            raise ContractError(f"decision covers unknown tickers {sorted(missing)}")
        w = np.array([self.weights.get(t, 0.0) for t in tickers], dtype=float)
        return np.append(w, 1.0 - w.sum())


# ----------------------------------------------------------- fusion core


def _tool_weight(tool: str, ticker: str, context: PlannerContext) -> float:
    weight = 1.0
    qualities = [
        e.quality
        for e in context.memory_entries
        if e.ticker == ticker and tool in e.tools_used
    ]
    if qualities:
        weight *= 0.5 + float(np.mean(qualities))
    if context.regime == "bear" and tool in RISK_TOOLS:
        weight *= BEAR_RISK_SCALE
    if context.tool_weight_overrides:
        weight *= context.tool_weight_overrides.get(tool, 1.0)
    return weight


def _weighted_mean(pairs: list[tuple[float, float]]) -> float:
    """pairs of (signal, weight) -> weighted mean, 0 when empty."""
    total = sum(w for _, w in pairs)
    if total == 0.0:
        return 0.0
    return sum(s * w for s, w in pairs) / total


def _fuse(tools: dict, ticker: str, context: PlannerContext, names=None) -> float:
    selected = names if names is not None else tools.keys()
    pairs = [
        (tools[name].signal, _tool_weight(name, ticker, context))
        for name in selected
        if name in tools
    ]
    return _weighted_mean(pairs)


def _group_means(tools: dict, ticker: str, context: PlannerContext) -> dict:
    means = {}
    for group, names in SIGNAL_GROUPS.items():
        present = [n for n in names if n in tools]
        if present:
            means[group] = _fuse(tools, ticker, context, present)
    return means


def _score_sequential(tools, ticker, context):
    return _fuse(tools, ticker, context)


def _score_decompose(tools, ticker, context):
    means = _group_means(tools, ticker, context)
    if not means:
        return _fallback(tools, ticker, context, "decompose")
    return float(np.mean(list(means.values())))


def _score_adaptive(tools, ticker, context):
    if not any(name in tools for name in QUICK_LOOK_TOOLS):
        return _fallback(tools, ticker, context, "adaptive")
    quick = _fuse(tools, ticker, context, QUICK_LOOK_TOOLS)
    if abs(quick) >= ADAPTIVE_AMBIGUITY:
        return quick
    return _fuse(tools, ticker, context)


def _score_cot(tools, ticker, context):
    """Staged fusion; a disagreeing stage damps the running score by 0.75."""
    means = _group_means(tools, ticker, context)
    stages = [means[g] for g in COT_STAGE_ORDER if g in means]
    if not stages:
        return _fallback(tools, ticker, context, "cot_reasoning")
    running = stages[0]
    for stage in stages[1:]:
        if running * stage < 0.0:
            running *= COT_DISAGREE_DAMP
        running = (running + stage) / 2.0
    return running


def _score_reflexion(tools, ticker, context):
    quick_outputs = [tools[n] for n in QUICK_LOOK_TOOLS if n in tools]
    if not quick_outputs:
        return _fallback(tools, ticker, context, "reflexion")
    confidence = float(np.mean([o.confidence for o in quick_outputs]))
    if confidence < REFLEXION_CONFIDENCE:
        return _fuse(tools, ticker, context)
    return _fuse(tools, ticker, context, QUICK_LOOK_TOOLS)


def _score_hypothesis(tools, ticker, context):
    bulls = []
    bears = []
    for name, out in tools.items():
        weight = _tool_weight(name, ticker, context)
        if out.signal > 0:
            bulls.append((out.signal, weight))
        elif out.signal < 0:
            bears.append((-out.signal, weight))
    bull = _weighted_mean(bulls)
    bear = _weighted_mean(bears)
    return float(np.clip(bull - bear, -1.0, 1.0))


def _fallback(tools, ticker, context, family):
    logger.warning(
        "%s planner missing required tool outputs for %s; sequential fallback",
        family,
        ticker,
    )
    return _fuse(tools, ticker, context)


_FAMILY_SCORERS = {
    "sequential": _score_sequential,
    "decompose": _score_decompose,
    "adaptive": _score_adaptive,
    "cot_reasoning": _score_cot,
    "reflexion": _score_reflexion,
    "hypothesis_test": _score_hypothesis,
}


def _score_evolved(planner: Planner, tools, ticker, context):
    base = _fuse(tools, ticker, context)
    damp = float(planner.params.get("damp", 0.5))
    prev = (context.prev_momentum or {}).get(ticker)
    current = tools.get("compute_momentum")
    if prev is not None and current is not None and prev * current.signal < 0.0:
        base *= damp
    return base


def plan(
    planner: Planner,
    context: PlannerContext,
    temperature: float = DEFAULT_TEMPERATURE,
    risk_budget: float = DEFAULT_RISK_BUDGET,
) -> AllocationDecision:
    """Fuse tool signals per the planner family and map scores to weights."""
    scores = {}
    for ticker in sorted(context.tool_outputs):
        tools = context.tool_outputs[ticker]
        for out in tools.values():
            if not isinstance(out, ToolOutput):
                raise ContractError(f"tool outputs for {ticker} must be ToolOutput")
        if planner.family.startswith("evolved_"):
            scores[ticker] = _score_evolved(planner, tools, ticker, context)
        else:
            scores[ticker] = _FAMILY_SCORERS[planner.family](tools, ticker, context)
    return score_to_weights(scores, temperature=temperature, risk_budget=risk_budget)


def score_to_weights(
    scores: dict,
    temperature: float = DEFAULT_TEMPERATURE,
    risk_budget: float = DEFAULT_RISK_BUDGET,
) -> AllocationDecision:
    """Softmax over ticker scores scaled by the risk budget; cash is the rest."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not (0.0 < risk_budget <= 1.0):
        raise ConfigError(f"risk budget must lie in (0, 1], got {risk_budget}")
    if not scores:
        raise ContractError("no ticker scores to allocate")
    tickers = sorted(scores)
    raw = np.array([scores[t] for t in tickers], dtype=float) / temperature
    raw -= raw.max()  # stable softmax
    expo = np.exp(raw)
    softmax = expo / expo.sum()
    weights = {t: float(risk_budget * w) for t, w in zip(tickers, softmax)}
    return AllocationDecision(weights=weights, per_ticker_scores=dict(scores))


def baseline_allocate(kind: str, trailing_window: PriceSeries) -> AllocationDecision:
    """The four non-LLM baselines: EqW, Mom, MinV (diagonal), InvM."""
    if kind not in BASELINE_KINDS:
        raise ConfigError(f"unknown baseline {kind!r}")
    tickers = trailing_window.tickers
    n = len(tickers)
    if kind == "EqW":
        return AllocationDecision(
            weights={t: 1.0 / n for t in tickers},
            per_ticker_scores={t: 0.0 for t in tickers},
        )
    if trailing_window.n_bars < 20:
        raise ContractError(f"{kind} needs >= 20 trailing bars, got {trailing_window.n_bars}")
    closes = trailing_window.close
    window_return = closes[-1] / closes[-20] - 1.0
    if kind in ("Mom", "InvM"):
        raw = np.maximum(0.0, window_return if kind == "Mom" else -window_return)
        if raw.sum() == 0.0:
            raw = np.ones(n)
        weights = raw / raw.sum()
        scores = window_return if kind == "Mom" else -window_return
    else:  # MinV: inverse-variance diagonal approximation
        variances = np.var(trailing_window.bar_returns(), axis=0, ddof=1)
        if np.any(variances == 0.0):
            raw = (variances == 0.0).astype(float)
        else:
            raw = 1.0 / variances
        weights = raw / raw.sum()
        scores = -variances
    return AllocationDecision(
        weights={t: float(w) for t, w in zip(tickers, weights)},
        per_ticker_scores={t: float(s) for t, s in zip(tickers, scores)},
    )

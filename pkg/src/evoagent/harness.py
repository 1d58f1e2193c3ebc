"""The experiment loop: train on two timescales, validate checkpoints, test frozen.

Training interleaves fast per-episode bandit updates with slow-window
reflection, distillation, and evolution. At each slow-window boundary the
full agent state is checkpointed; validation replays every checkpoint on
the held-out middle split and freezes the best one; the test phase runs
that frozen agent with sampling still active but zero learning and zero
writes. All randomness flows from named child streams of the run seed, so
a run is a pure function of its config.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .bandits import (
    BetaArm,
    ContextVector,
    LinUCBPool,
    PerToolSelector,
    PerToolSelectorConfig,
    ThompsonSelector,
)
from .canonical import state_hash
from .config import RunConfig
from .credit import (
    MODULES,
    CharacteristicFunction,
    CreditVector,
    EpisodeOutcome,
    PlannerTrace,
    all_coalitions,
    counterfactual_credit,
    fcc_combine,
    llm_fcc_credit,
    module_reward,
    shapley_credit,
    structural_credit,
    uniform_reward,
)
from .errors import DataError
from .market import (
    PortfolioState,
    PriceSeries,
    apply_costs,
    compute_metrics,
    load_csv,
    outcome_score,
    step,
    synth_generate,
)
from .memory import (
    MemoryQuery,
    MemoryStore,
    RetrievalPolicy,
    Tier,
    WindowRecord,
    default_policies,
    distill_semantic,
    promote_procedural,
    retrieve,
    write_episodic,
)
from .planners import (
    BASELINE_KINDS,
    PLANNER_FAMILIES,
    Planner,
    PlannerContext,
    baseline_allocate,
    plan,
    score_to_weights,
)
from .reflection import (
    PLANNER_FAILURE_STREAK,
    EpisodeSummary,
    MarketSideInfo,
    PolicyPoolStats,
    ReflectionInsight,
    ReflectionRequest,
    SkillEvent,
    backend_distiller,
    cold_start_priors,
    evolve_memory_policy,
    make_backend,
    planner_evolution_check,
    reflect,
    skill_extract,
    volatility_terciles,
)
from .toolkit import TOOL_NAMES, ToolOutput, ToolRegistry, run_tool

logger = logging.getLogger(__name__)

# Named child streams of the run seed; anything stochastic draws from one.
STREAM_POLICY = 1
STREAM_TOOLS = 2
STREAM_VAL = 3
STREAM_TEST = 4

COST_GRID_BP = (0.0, 5.0, 10.0, 20.0)
WARM_UP_POLICY = "compressed"  # retrieval exercised but unused during warm-up
SKILL_RATE_FLOOR = 0.6  # proven skills boost their tools' fusion weight
SKILL_TOOL_BOOST = 1.1
RISK_WARNING_SIGNAL = -0.5  # mean risk signal below this flags a warning
RISK_WARNING_CASH = 0.2  # staying under this cash share ignores the warning

TOOL_DESCRIPTIONS = {
    "get_price_history": "summarize the cached OHLCV window",
    "get_fundamentals": "fundamental ratios from the per-ticker data file",
    "get_analyst_data": "analyst consensus from the per-ticker data file",
    "get_options_data": "options positioning from the per-ticker data file",
    "get_earnings_data": "earnings trend from the per-ticker data file",
    "compute_technicals": "RSI, MACD, and Bollinger placement",
    "compute_quant_risk": "VaR, CVaR, volatility, and drawdown",
    "compute_momentum": "multi-horizon price momentum",
    "compute_correlations": "cross-ticker return correlation",
    "run_dcf_model": "discounted-cash-flow style valuation gap",
    "score_risk": "blended riskiness score",
    "score_composite_signal": "confidence-weighted fusion of the core signals",
}
PLANNER_DESCRIPTIONS = {
    "sequential": "weighted mean over every tool signal",
    "decompose": "average of per-group signal means",
    "adaptive": "quick momentum pass, full fusion only when ambiguous",
    "cot_reasoning": "staged fusion that damps on stage disagreement",
    "reflexion": "quick pass revised by a full second pass when unsure",
    "hypothesis_test": "bull-case mean minus bear-case mean",
}


def stream_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


# ------------------------------------------------------------ data access


class EpisodeRunner:
    """Windowed access to the price series with a pure-function tool cache.

    Episode i decides on bars [0, burn_in + i] and is scored against the
    next bar's returns. Tool outputs depend only on (tool, ticker, window),
    so they are cached across training, validation replays, and test.
    """

    def __init__(self, config: RunConfig, series: PriceSeries, registry: ToolRegistry):
        if series.n_bars < config.required_bars():
            raise DataError(
                f"need {config.required_bars()} bars for the configured split, "
                f"got {series.n_bars}"
            )
        self.config = config
        self.series = series
        self.registry = registry
        self.tickers = series.tickers
        self.returns = series.bar_returns()
        sectors = sorted({config.sector_of(t) for t in self.tickers})
        scale = max(1, len(sectors) - 1)
        self.sector_codes = {
            t: sectors.index(config.sector_of(t)) / scale for t in self.tickers
        }
        self.look_ahead_violations = 0
        self._windows: dict[int, PriceSeries] = {}
        self._tool_cache: dict[tuple[int, str, str], ToolOutput] = {}

    def window(self, i: int) -> PriceSeries:
        if i not in self._windows:
            stop = self.config.burn_in + i + 1
            window = self.series.slice(0, stop)
            # the outcome bar must lie strictly after everything visible
            if window.timestamps[-1] >= self.series.timestamps[stop]:
                self.look_ahead_violations += 1
            self._windows[i] = window
        return self._windows[i]

    def asset_returns(self, i: int) -> np.ndarray:
        return self.returns[self.config.burn_in + i]

    def tool_output(self, i: int, ticker: str, tool: str) -> ToolOutput:
        key = (i, ticker, tool)
        if key not in self._tool_cache:
            self._tool_cache[key] = run_tool(self.registry, tool, ticker, self.window(i))
        return self._tool_cache[key]

    def outputs_for(self, i: int, tools) -> dict:
        return {
            ticker: {tool: self.tool_output(i, ticker, tool) for tool in sorted(tools)}
            for ticker in self.tickers
        }

    def sector(self, ticker: str) -> str:
        return self.config.sector_of(ticker)


# ------------------------------------------------------------ agent state


@dataclass
class AgentState:
    """Every learnable component plus the carried reflection context."""

    policies: dict  # policy_id -> RetrievalPolicy
    selector: ThompsonSelector | None
    store: MemoryStore | None
    per_tool: PerToolSelector | None
    planner_pool: LinUCBPool | None
    planners: dict  # planner id -> Planner
    insight: ReflectionInsight | None = None
    insight_history: list = field(default_factory=list)
    skills: dict = field(default_factory=dict)
    failure_streaks: dict = field(default_factory=dict)
    prev_momentum: dict = field(default_factory=dict)

    def checkpoint(self) -> "AgentState":
        """Posterior-preserving deep copy (RNG streams are reattached later)."""
        placeholder = np.random.default_rng(0)
        return AgentState(
            policies=dict(self.policies),
            selector=self.selector.clone(placeholder) if self.selector else None,
            store=self.store.clone() if self.store else None,
            per_tool=self.per_tool.clone(placeholder) if self.per_tool else None,
            planner_pool=self.planner_pool.clone() if self.planner_pool else None,
            planners=dict(self.planners),
            insight=self.insight,
            insight_history=list(self.insight_history),
            skills=dict(self.skills),
            failure_streaks=dict(self.failure_streaks),
            prev_momentum=dict(self.prev_momentum),
        )

    def frozen_copy(self, policy_rng, tools_rng) -> "AgentState":
        """Evaluation copy: fresh sampling streams, every component frozen."""
        copy = self.checkpoint()
        if copy.selector is not None:
            copy.selector = copy.selector.clone(policy_rng)
            copy.selector.freeze()
        if copy.store is not None:
            copy.store.freeze()
        if copy.per_tool is not None:
            copy.per_tool = copy.per_tool.clone(tools_rng)
            copy.per_tool.freeze()
        if copy.planner_pool is not None:
            copy.planner_pool.freeze()
        return copy

    def posteriors_snapshot(self) -> dict:
        return {
            "policy_selector": self.selector.snapshot() if self.selector else None,
            "per_tool": self.per_tool.snapshot() if self.per_tool else None,
            "planner_pool": self.planner_pool.snapshot() if self.planner_pool else None,
            "policies": sorted(self.policies),
            "planners": sorted(self.planners),
            "skills": {
                key: {"success_rate": s.success_rate, "applications": s.applications}
                for key, s in sorted(self.skills.items())
            },
        }

    def hashes(self) -> dict:
        return {
            "posteriors": state_hash(self.posteriors_snapshot()),
            "memory": self.store.content_hash() if self.store else state_hash(None),
        }


def _initial_agent(config: RunConfig, backend) -> AgentState:
    tool_priors = None
    if config.cold_start:
        priors = cold_start_priors(TOOL_DESCRIPTIONS, PLANNER_DESCRIPTIONS, backend)
        tool_priors = {name: priors[name] for name in TOOL_NAMES}
    policies: dict[str, RetrievalPolicy] = {}
    selector = None
    store = None
    if config.memory_enabled:
        policies = {p.policy_id: p for p in default_policies()}
        selector = ThompsonSelector(
            [BetaArm(pid, 1.0, 1.0) for pid in policies],
            stream_rng(config.seed, STREAM_POLICY),
        )
        store = MemoryStore()
    per_tool = None
    if config.per_tool_selection or config.cold_start:
        per_tool = PerToolSelector(
            list(TOOL_NAMES),
            PerToolSelectorConfig(),
            stream_rng(config.seed, STREAM_TOOLS),
            priors=tool_priors,
        )
    planner_pool = None
    if config.planner_selection or config.planner_evolution:
        planner_pool = LinUCBPool(list(PLANNER_FAMILIES))
        planners = {name: Planner(name) for name in PLANNER_FAMILIES}
    else:
        planners = {config.planner_family: Planner(config.planner_family)}
    return AgentState(
        policies=policies,
        selector=selector,
        store=store,
        per_tool=per_tool,
        planner_pool=planner_pool,
        planners=planners,
    )


# -------------------------------------------------------- episode mechanics


@dataclass
class _Step:
    """Everything one episode produced, for updates and the run log."""

    episode: int
    phase: str
    policy_id: str
    planner_id: str
    outputs: dict
    entries: list
    decision: object
    weights: np.ndarray
    asset_returns: np.ndarray
    portfolio_return: float
    score: float
    phi: ContextVector | None
    context: PlannerContext | None  # None during warm-up (no fusion ran)

    def record(self, reward: float, credit: dict | None, regime: str | None,
               active_tools: tuple | None) -> dict:
        doc = {
            "episode": self.episode,
            "phase": self.phase,
            "policy": self.policy_id,
            "planner": self.planner_id,
            "score": self.score,
            "reward": reward,
            "return": self.portfolio_return,
            "regime": regime,
            "retrieved": len(self.entries),
            "credit": credit,
        }
        if active_tools is not None:
            doc["tools"] = sorted(active_tools)
        return doc


def _skill_overrides(skills: dict) -> dict | None:
    boosted = {
        tool: SKILL_TOOL_BOOST
        for skill in skills.values()
        if skill.success_rate > SKILL_RATE_FLOOR
        for tool in skill.skill_id.split(",")
    }
    return boosted or None


def _retrieval(agent: AgentState, runner: EpisodeRunner, policy: RetrievalPolicy,
               i: int, active_tools, regime: str | None):
    """Per-ticker retrieval, deduplicated across tickers."""
    entries: list = []
    seen: set[str] = set()
    texts: list[str] = []
    for ticker in runner.tickers:
        query = MemoryQuery(
            ticker=ticker,
            sector=runner.sector(ticker),
            tools=frozenset(active_tools),
            current_episode=i,
            regime=regime,
        )
        hits, text = retrieve(agent.store, policy, query)
        for entry in hits:
            if entry.entry_id not in seen:
                seen.add(entry.entry_id)
                entries.append(entry)
        if text:
            texts.append(text)
    return entries, "\n".join(texts)


def _planner_phi(runner: EpisodeRunner, i: int, outputs: dict) -> ContextVector:
    """Episode features aggregated over tickers, from visible data only."""
    window = runner.window(i)
    rows = window.bar_returns()[-30:]
    eq = rows.mean(axis=1) if rows.ndim == 2 else rows
    volatility = float(np.std(eq, ddof=1)) if eq.size >= 2 else 0.0

    def mean_over(tool: str, f) -> float:
        values = [f(tools[tool]) for tools in outputs.values() if tool in tools]
        return float(np.mean(values)) if values else 0.0

    caps = [
        np.log10(tools["get_fundamentals"].fields["market_cap"])
        for tools in outputs.values()
        if "get_fundamentals" in tools
        and isinstance(tools["get_fundamentals"].fields.get("market_cap"), (int, float))
        and tools["get_fundamentals"].fields["market_cap"] > 0
    ]
    richness = [
        1.0 if out.confidence > 0 else 0.0
        for tools in outputs.values()
        for out in tools.values()
    ]
    return ContextVector.from_features(
        sector_code=float(np.mean([runner.sector_codes[t] for t in runner.tickers])),
        volatility_30d=volatility,
        log_market_cap=float(np.mean(caps)) if caps else 0.0,
        data_richness=float(np.mean(richness)) if richness else 0.0,
        momentum=mean_over("compute_momentum", lambda o: o.signal),
        options_availability=mean_over("get_options_data", lambda o: float(o.confidence > 0)),
        analyst_coverage=mean_over("get_analyst_data", lambda o: float(o.confidence > 0)),
    )


def _episode_decision(config: RunConfig, runner: EpisodeRunner, agent: AgentState,
                      i: int, phase: str, warm_up: bool) -> _Step:
    regime = None if config.no_reflection or agent.insight is None else agent.insight.regime
    insight_text = None if config.no_reflection or agent.insight is None else (
        agent.insight.causal_insight
    )

    if warm_up:
        active = tuple(TOOL_NAMES)
    elif agent.per_tool is not None:
        active = tuple(sorted(agent.per_tool.select(i)))
    else:
        active = tuple(TOOL_NAMES)
    outputs = runner.outputs_for(i, active)

    entries: list = []
    retrieved_text = ""
    policy_id = "none"
    if agent.selector is not None:
        policy_id = WARM_UP_POLICY if warm_up else agent.selector.select()
        entries, retrieved_text = _retrieval(
            agent, runner, agent.policies[policy_id], i, active, regime
        )

    phi = None
    context = None
    if warm_up:
        planner_id = "composite"
        scores = {
            ticker: runner.tool_output(i, ticker, "score_composite_signal").signal
            for ticker in runner.tickers
        }
        decision = score_to_weights(
            scores, temperature=config.temperature, risk_budget=config.risk_budget
        )
    else:
        if agent.planner_pool is not None:
            phi = _planner_phi(runner, i, outputs)
            planner_id = agent.planner_pool.select(phi)
        else:
            planner_id = config.planner_family
        context = PlannerContext(
            tool_outputs=outputs,
            retrieved_memory=retrieved_text,
            memory_entries=tuple(entries),
            reflection_insight=insight_text,
            regime=regime,
            procedural_rules=tuple(
                e.content for e in entries if e.tier == Tier.PROCEDURAL
            ),
            prev_momentum=dict(agent.prev_momentum) or None,
            tool_weight_overrides=_skill_overrides(agent.skills)
            if config.skill_extraction
            else None,
        )
        decision = plan(
            agent.planners[planner_id],
            context,
            temperature=config.temperature,
            risk_budget=config.risk_budget,
        )

    weights = decision.to_vector(runner.tickers)
    asset_returns = runner.asset_returns(i)
    portfolio_return = float(weights[:-1] @ asset_returns)
    for ticker in runner.tickers:
        tools = outputs[ticker]
        if "compute_momentum" in tools:
            agent.prev_momentum[ticker] = tools["compute_momentum"].signal
    return _Step(
        episode=i,
        phase=phase,
        policy_id=policy_id,
        planner_id=planner_id,
        outputs=outputs,
        entries=entries,
        decision=decision,
        weights=weights,
        asset_returns=asset_returns,
        portfolio_return=portfolio_return,
        score=outcome_score(portfolio_return),
        phi=phi,
        context=context,
    )


def _episode_hits(step_data: _Step, tickers) -> dict:
    """This episode's per-tool directional tallies across tickers."""
    hits: dict[str, dict] = {}
    for k, ticker in enumerate(tickers):
        ret = float(step_data.asset_returns[k])
        for tool, out in step_data.outputs[ticker].items():
            entry = hits.setdefault(tool, {"correct": 0, "incorrect": 0, "total": 0})
            entry["total"] += 1
            if out.signal != 0.0 and ret != 0.0:
                if (out.signal > 0) == (ret > 0):
                    entry["correct"] += 1
                else:
                    entry["incorrect"] += 1
    return hits


# ------------------------------------------------------------- credit suite


def _replay_score(config: RunConfig, step_data: _Step, planner: Planner,
                  context: PlannerContext, tickers) -> float:
    decision = plan(
        planner, context, temperature=config.temperature, risk_budget=config.risk_budget
    )
    weights = decision.to_vector(tickers)
    return outcome_score(float(weights[:-1] @ step_data.asset_returns))


def _neutral_outputs(outputs: dict) -> dict:
    return {
        ticker: {tool: ToolOutput(tool, 0.0, 0.0, {}) for tool in tools}
        for ticker, tools in outputs.items()
    }


def _coalition_value(config: RunConfig, step_data: _Step, planner: Planner,
                     coalition: frozenset, tickers) -> float:
    """The decision replayed with absent modules neutralized, else held fixed."""
    if "planner" not in coalition:
        # no planner: no view, so scores are flat and the softmax is uniform
        decision = score_to_weights(
            {t: 0.0 for t in tickers},
            temperature=config.temperature,
            risk_budget=config.risk_budget,
        )
        weights = decision.to_vector(tickers)
        r = float(weights[:-1] @ step_data.asset_returns)
        return uniform_reward(outcome_score(r))
    context = step_data.context
    if "tools" not in coalition:
        context = replace(context, tool_outputs=_neutral_outputs(step_data.outputs))
    if "memory" not in coalition:
        context = replace(
            context, retrieved_memory="", memory_entries=(), procedural_rules=()
        )
    return uniform_reward(_replay_score(config, step_data, planner, context, tickers))


def _replay_with_default(config: RunConfig, runner: EpisodeRunner, agent: AgentState,
                         step_data: _Step, module: str) -> float:
    """Counterfactual score with one module swapped for its default."""
    context = step_data.context
    planner = agent.planners[step_data.planner_id]
    if module == "planner":
        planner = Planner("sequential")
    elif module == "tools":
        context = replace(
            context, tool_outputs=runner.outputs_for(step_data.episode, TOOL_NAMES)
        )
    elif module == "memory":
        if agent.store is None:
            return step_data.score
        default_policy = agent.policies.get(
            WARM_UP_POLICY,
            RetrievalPolicy(WARM_UP_POLICY, frozenset(Tier), 5, "ranked_truncate"),
        )
        active = tuple(sorted(step_data.outputs[runner.tickers[0]]))
        found, text = _retrieval(
            agent, runner, default_policy, step_data.episode, active, context.regime
        )
        context = replace(
            context,
            retrieved_memory=text,
            memory_entries=tuple(found),
            procedural_rules=tuple(
                e.content for e in found if e.tier == Tier.PROCEDURAL
            ),
        )
    return _replay_score(config, step_data, planner, context, runner.tickers)


def _episode_outcome(step_data: _Step, tickers) -> EpisodeOutcome:
    if step_data.entries:
        usefulness = float(np.mean([e.quality for e in step_data.entries]))
    else:
        usefulness = 0.5  # no retrieval: memory neither helped nor hurt
    return EpisodeOutcome(
        score=step_data.score,
        per_tool_hits=_episode_hits(step_data, tickers),
        planner_trace=PlannerTrace(
            steps_fraction=1.0, prediction_correct=step_data.portfolio_return > 0
        ),
        memory_usefulness=usefulness,
    )


def _risk_warning_ignored(step_data: _Step) -> bool:
    signals = [
        tools["score_risk"].signal
        for tools in step_data.outputs.values()
        if "score_risk" in tools
    ]
    if not signals:
        return False
    warned = float(np.mean(signals)) < RISK_WARNING_SIGNAL
    return warned and step_data.decision.cash < RISK_WARNING_CASH


def _credit_rewards(config: RunConfig, runner: EpisodeRunner, agent: AgentState,
                    step_data: _Step, r_tilde: float, backend) -> tuple[dict, dict | None]:
    """Per-module update rewards plus the logged credit vector."""
    if config.credit_method == "uniform":
        return {m: r_tilde for m in MODULES}, None
    outcome = _episode_outcome(step_data, runner.tickers)
    if config.credit_method == "llm_fcc":
        vector = llm_fcc_credit(
            outcome, {"risk_warning_ignored": _risk_warning_ignored(step_data)}, backend
        )
    else:
        planner = agent.planners[step_data.planner_id]

        def replay(module: str) -> float:
            return _replay_with_default(config, runner, agent, step_data, module)

        struct = structural_credit(outcome)
        counter = CreditVector(
            *[counterfactual_credit(outcome, module, replay) for module in MODULES]
        )
        v = CharacteristicFunction(
            {
                coalition: _coalition_value(
                    config, step_data, planner, coalition, runner.tickers
                )
                for coalition in all_coalitions()
            }
        )
        vector = fcc_combine(struct, counter, shapley_credit(v))
    rewards = {
        m: module_reward(r_tilde, vector.component(m), config.blend_lambda)
        for m in MODULES
    }
    return rewards, vector.as_dict()


# --------------------------------------------------------------- training


@dataclass
class _WindowAccumulator:
    """Slow-window evidence: summaries, hits, planner scores, raw records."""

    start: int = 0
    summaries: list = field(default_factory=list)
    hits: dict = field(default_factory=dict)
    planner_scores: dict = field(default_factory=dict)

    def reset(self, start: int) -> None:
        self.start = start
        self.summaries = []
        self.hits = {}
        self.planner_scores = {}

    def absorb(self, step_data: _Step, tickers) -> None:
        for k, ticker in enumerate(tickers):
            ret = float(step_data.asset_returns[k])
            stance = step_data.decision.per_ticker_scores.get(ticker, 0.0)
            correct = None
            if stance != 0.0 and ret != 0.0:
                correct = (stance > 0) == (ret > 0)
            self.summaries.append(
                EpisodeSummary(
                    episode=step_data.episode,
                    ticker=ticker,
                    planner=step_data.planner_id,
                    score=stance,
                    direction_correct=correct,
                )
            )
        for tool, tally in _episode_hits(step_data, tickers).items():
            merged = self.hits.setdefault(tool, {"correct": 0, "incorrect": 0})
            merged["correct"] += tally["correct"]
            merged["incorrect"] += tally["incorrect"]
        self.planner_scores.setdefault(step_data.planner_id, []).append(step_data.score)

    def tool_accuracy(self) -> dict:
        rates = {}
        for tool, tally in self.hits.items():
            decided = tally["correct"] + tally["incorrect"]
            if decided:
                rates[tool] = tally["correct"] / decided
        return rates


def _equal_weight_volatility(rows: np.ndarray) -> float:
    if rows.shape[0] < 2:
        return 0.0
    return float(np.std(rows.mean(axis=1), ddof=1))


def _window_side_info(config: RunConfig, runner: EpisodeRunner, start: int,
                      stop: int) -> MarketSideInfo:
    """Aggregates over the window's outcome bars (never shown per-episode)."""
    b = config.burn_in
    rows = runner.returns[b + start : b + stop]
    window_returns = np.prod(1.0 + rows, axis=0) - 1.0
    by_sector: dict[str, list[float]] = {}
    for k, ticker in enumerate(runner.tickers):
        by_sector.setdefault(runner.sector(ticker), []).append(float(window_returns[k]))
    if rows.shape[0] >= 2 and rows.shape[1] >= 2:
        corr = np.corrcoef(rows.T)
        off = corr[~np.eye(corr.shape[0], dtype=bool)]
        mean_corr = float(np.nan_to_num(off).mean())
    else:
        mean_corr = 0.0
    return MarketSideInfo(
        sector_returns={s: float(np.mean(v)) for s, v in by_sector.items()},
        realized_volatility=_equal_weight_volatility(rows),
        mean_cross_correlation=mean_corr,
    )


def _train_volatility_terciles(config: RunConfig, runner: EpisodeRunner):
    """Calibrate regime cutoffs on complete training windows only."""
    b, m = config.burn_in, config.slow_window
    vols = []
    for w in range(config.split.train // m):
        rows = runner.returns[b + w * m : b + (w + 1) * m]
        vols.append(_equal_weight_volatility(rows))
    return volatility_terciles(vols) if vols else None


def _write_episode_memory(config: RunConfig, agent: AgentState, runner: EpisodeRunner,
                          step_data: _Step) -> None:
    regime = None if config.no_reflection or agent.insight is None else agent.insight.regime
    for k, ticker in enumerate(runner.tickers):
        ret = float(step_data.asset_returns[k])
        stance = step_data.decision.per_ticker_scores.get(ticker, 0.0)
        correct_tools = frozenset(
            tool
            for tool, out in step_data.outputs[ticker].items()
            if out.signal != 0.0 and ret != 0.0 and (out.signal > 0) == (ret > 0)
        )
        # stance-signed outcome: positive when our per-ticker call was right
        magnitude = abs(outcome_score(ret))
        if stance == 0.0 or ret == 0.0:
            ticker_outcome = 0.0
        elif (stance > 0) == (ret > 0):
            ticker_outcome = magnitude
        else:
            ticker_outcome = -magnitude
        move = "gained" if ret > 0 else ("lost" if ret < 0 else "held")
        write_episodic(
            agent.store,
            episode=step_data.episode,
            ticker=ticker,
            sector=runner.sector(ticker),
            tools_used=correct_tools,
            content=(
                f"{ticker} {move} {ret * 100:+.3f}%; agreeing tools: "
                f"{', '.join(sorted(correct_tools)) or 'none'}"
            ),
            outcome=ticker_outcome,
            regime=regime,
        )


def _train(config: RunConfig, runner: EpisodeRunner, agent: AgentState, backend):
    """The training loop; returns (episode records, checkpoints)."""
    records: list[dict] = []
    checkpoints: list[tuple[int, AgentState]] = []
    window = _WindowAccumulator()
    distill_buffer: list[WindowRecord] = []
    policy_update_buffer: list[tuple[str, float]] = []
    warm_up = config.effective_warm_up
    m = config.slow_window

    for i in range(config.split.train):
        in_warm_up = i < warm_up
        step_data = _episode_decision(
            config, runner, agent, i, "warm_up" if in_warm_up else "train", in_warm_up
        )
        r_tilde = uniform_reward(step_data.score)
        regime = None if config.no_reflection or agent.insight is None else (
            agent.insight.regime
        )
        window.absorb(step_data, runner.tickers)
        if config.memory_enabled:
            distill_buffer.append(step_data)
            _write_episode_memory(config, agent, runner, step_data)

        credit_doc = None
        if in_warm_up:
            records.append(step_data.record(r_tilde, None, regime, None))
        else:
            rewards, credit_doc = _credit_rewards(
                config, runner, agent, step_data, r_tilde, backend
            )
            if agent.selector is not None:
                policy_update_buffer.append((step_data.policy_id, rewards["memory"]))
                if len(policy_update_buffer) >= config.fast_window:
                    for policy_id, reward in policy_update_buffer:
                        agent.selector.update(policy_id, reward)
                    policy_update_buffer.clear()
            if agent.per_tool is not None:
                for tool, tally in _episode_hits(step_data, runner.tickers).items():
                    decided = tally["correct"] + tally["incorrect"]
                    if decided:
                        agent.per_tool.update(tool, tally["correct"] / decided)
            if agent.planner_pool is not None and step_data.phi is not None:
                agent.planner_pool.update(
                    step_data.planner_id, step_data.phi, rewards["planner"]
                )
            if config.skill_extraction:
                used = tuple(
                    sorted(
                        {
                            tool
                            for tools in step_data.outputs.values()
                            for tool, out in tools.items()
                            if out.signal != 0.0
                        }
                    )
                )
                if len(used) >= 2:
                    agent.skills = skill_extract(
                        [SkillEvent(used, step_data.portfolio_return > 0)], agent.skills
                    )
            active = (
                tuple(sorted(step_data.outputs[runner.tickers[0]]))
                if agent.per_tool is not None
                else None
            )
            records.append(step_data.record(r_tilde, credit_doc, regime, active))

        at_boundary = (i + 1) % m == 0
        if at_boundary and not config.no_reflection:
            request = ReflectionRequest(
                episode_summaries=tuple(window.summaries),
                tool_accuracy=window.tool_accuracy(),
                market_side_info=_window_side_info(config, runner, window.start, i + 1),
                prior_insights=tuple(agent.insight_history[-3:]),
            )
            agent.insight = reflect(request, backend)
            agent.insight_history.append(agent.insight)

        if config.memory_enabled and (i + 1) % config.distill_every == 0:
            label = None if config.no_reflection or agent.insight is None else (
                agent.insight.regime
            )
            window_records = [
                WindowRecord(
                    episode=s.episode,
                    ticker=ticker,
                    sector=runner.sector(ticker),
                    tool_signals={
                        tool: out.signal for tool, out in s.outputs[ticker].items()
                    },
                    realized_return=float(s.asset_returns[k]),
                    regime=label,
                )
                for s in distill_buffer
                for k, ticker in enumerate(runner.tickers)
            ]
            distill_semantic(agent.store, window_records, backend_distiller(backend))
            promote_procedural(agent.store, i, config.distill_every)
            distill_buffer.clear()

        if at_boundary:
            j = (i + 1) // m
            schedule = config.evolution
            if (
                config.memory_enabled
                and not config.no_reflection
                and j > schedule.j_min
                and j % schedule.every == 0
                and agent.selector.mean_posterior_reward() < schedule.r_min
            ):
                stats = PolicyPoolStats(
                    window_index=j,
                    mean_posterior_reward=agent.selector.mean_posterior_reward(),
                    policies=tuple(agent.policies.values()),
                )
                evolved = evolve_memory_policy(stats, agent.insight, backend)
                if evolved is not None:
                    agent.policies[evolved.policy_id] = evolved
                    agent.selector.add_arm(BetaArm(evolved.policy_id, 1.0, 1.0))
                    logger.info("adopted retrieval policy %s", evolved.policy_id)

            for planner_id, scores in window.planner_scores.items():
                if float(np.mean(scores)) < 0.0:
                    agent.failure_streaks[planner_id] = (
                        agent.failure_streaks.get(planner_id, 0) + 1
                    )
                else:
                    agent.failure_streaks[planner_id] = 0
            if config.planner_evolution and agent.failure_streaks:
                worst = max(agent.failure_streaks.values())
                if worst >= PLANNER_FAILURE_STREAK:
                    candidate = planner_evolution_check(
                        agent.failure_streaks, existing_ids=tuple(agent.planners)
                    )
                    if candidate is not None:
                        agent.planners[candidate.family] = candidate
                        agent.planner_pool.add_arm(candidate.family)
                        logger.info("adopted planner %s", candidate.family)
                    # the triggering streaks reset whether or not it passed
                    for planner_id, streak in agent.failure_streaks.items():
                        if streak >= PLANNER_FAILURE_STREAK:
                            agent.failure_streaks[planner_id] = 0

            checkpoints.append((j, agent.checkpoint()))
            window.reset(i + 1)

    if policy_update_buffer and agent.selector is not None:
        for policy_id, reward in policy_update_buffer:
            agent.selector.update(policy_id, reward)
        policy_update_buffer.clear()
    if not checkpoints or config.split.train % m != 0:
        checkpoints.append((len(checkpoints) + 1, agent.checkpoint()))
    return records, checkpoints


# --------------------------------------------------- validation + frozen test


def _run_frozen(config: RunConfig, runner: EpisodeRunner, frozen: AgentState,
                start: int, stop: int, phase: str):
    """Episodes with zero learning: no updates, no writes, no reflection."""
    records, scores, returns, weight_rows = [], [], [], []
    regime = None if config.no_reflection or frozen.insight is None else (
        frozen.insight.regime
    )
    for i in range(start, stop):
        step_data = _episode_decision(config, runner, frozen, i, phase, False)
        scores.append(step_data.score)
        returns.append(step_data.portfolio_return)
        weight_rows.append(step_data.weights)
        active = (
            tuple(sorted(step_data.outputs[runner.tickers[0]]))
            if frozen.per_tool is not None
            else None
        )
        records.append(
            step_data.record(uniform_reward(step_data.score), None, regime, active)
        )
    return records, scores, returns, weight_rows


def _validate(config: RunConfig, runner: EpisodeRunner, checkpoints):
    """Mean validation score per checkpoint; ties break to the earliest."""
    start = config.split.train
    stop = start + config.split.val
    means = {}
    for window_index, state in checkpoints:
        frozen = state.frozen_copy(
            stream_rng(config.seed, STREAM_VAL, 0), stream_rng(config.seed, STREAM_VAL, 1)
        )
        _, scores, _, _ = _run_frozen(config, runner, frozen, start, stop, "validation")
        means[window_index] = float(np.mean(scores))
    chosen = max(means, key=lambda w: (means[w], -w))
    return chosen, means


def _turnover(weight_rows) -> float:
    total = 0.0
    prev = None
    for w in weight_rows:
        risky = np.asarray(w)[:-1]
        if prev is None:
            prev = np.zeros_like(risky)
        total += float(np.abs(risky - prev).sum())
        prev = risky
    return total


# ----------------------------------------------------------------- results


@dataclass
class RunResult:
    """Everything one seeded run produced, JSON-serializable and stable."""

    config: dict
    episodes: list
    validation: dict
    hashes: dict
    test_metrics: dict
    cost_grid_sharpe: dict
    test_returns: list
    total_turnover: float
    look_ahead_violations: int
    counters: dict

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "episodes": self.episodes,
            "validation": self.validation,
            "hashes": self.hashes,
            "test_metrics": self.test_metrics,
            "cost_grid_sharpe": self.cost_grid_sharpe,
            "test_returns": self.test_returns,
            "total_turnover": self.total_turnover,
            "look_ahead_violations": self.look_ahead_violations,
            "counters": self.counters,
        }


def build_series(config: RunConfig) -> PriceSeries:
    if config.csv_path is not None:
        return load_csv(config.csv_path)
    return synth_generate(config.synth, config.seed)


def run(config: RunConfig) -> RunResult:
    """One full experiment: train, validate, freeze, test."""
    series = build_series(config)
    registry = ToolRegistry(config.data_dir)
    runner = EpisodeRunner(config, series, registry)
    terciles = _train_volatility_terciles(config, runner)
    backend = make_backend(config.backend, vol_terciles=terciles)
    agent = _initial_agent(config, backend)

    train_records, checkpoints = _train(config, runner, agent, backend)
    chosen, means = _validate(config, runner, checkpoints)
    final = dict(checkpoints)[chosen].frozen_copy(
        stream_rng(config.seed, STREAM_TEST, 0), stream_rng(config.seed, STREAM_TEST, 1)
    )

    hashes_before = final.hashes()
    start = config.split.train + config.split.val
    stop = start + config.split.test
    test_records, _, returns, weight_rows = _run_frozen(
        config, runner, final, start, stop, "test"
    )
    hashes_after = final.hashes()

    returns_arr = np.asarray(returns, dtype=float)
    adjusted = apply_costs(returns_arr, tuple(weight_rows), config.cost_bp)
    cost_grid = {
        f"{bp:g}": compute_metrics(
            apply_costs(returns_arr, tuple(weight_rows), bp)
        ).sharpe
        for bp in COST_GRID_BP
    }
    return RunResult(
        config=config.to_dict(),
        episodes=train_records + test_records,
        validation={
            "chosen_window": chosen,
            "candidate_means": {str(w): means[w] for w in sorted(means)},
        },
        hashes={
            "posteriors_before_test": hashes_before["posteriors"],
            "posteriors_after_test": hashes_after["posteriors"],
            "memory_before_test": hashes_before["memory"],
            "memory_after_test": hashes_after["memory"],
        },
        test_metrics=compute_metrics(adjusted).to_dict(),
        cost_grid_sharpe=cost_grid,
        test_returns=[float(r) for r in adjusted],
        total_turnover=_turnover(weight_rows),
        look_ahead_violations=runner.look_ahead_violations,
        counters={
            "backend_calls": getattr(backend, "calls", 0),
            "n_policies": len(agent.policies),
            "n_planners": len(agent.planners),
            "n_skills": len(agent.skills),
            "memory_episodic": agent.store.size(Tier.EPISODIC) if agent.store else 0,
            "memory_semantic": agent.store.size(Tier.SEMANTIC) if agent.store else 0,
            "memory_procedural": agent.store.size(Tier.PROCEDURAL) if agent.store else 0,
            "checkpoints": len(checkpoints),
        },
    )


AGGREGATE_METRICS = ("return_pct", "sharpe", "sortino", "max_dd_pct", "win_rate")


def aggregate_seed_metrics(per_seed: dict) -> tuple[dict, dict]:
    """Mean and sample std per metric; metrics undefined everywhere stay None."""
    mean, std = {}, {}
    for name in AGGREGATE_METRICS:
        values = [m[name] for m in per_seed.values() if m[name] is not None]
        if not values:
            mean[name] = None
            std[name] = None
            continue
        mean[name] = float(np.mean(values))
        std[name] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return mean, std


def run_seeds(config: RunConfig, seeds) -> dict:
    """Independent runs per seed with mean and sample-std aggregates."""
    seeds = list(seeds)
    if not seeds:
        raise DataError("need at least one seed")
    per_seed = {}
    for seed in seeds:
        result = run(RunConfig(**{**_config_kwargs(config), "seed": int(seed)}))
        per_seed[str(seed)] = result.test_metrics
    mean, std = aggregate_seed_metrics(per_seed)
    return {"seeds": [int(s) for s in seeds], "per_seed": per_seed, "mean": mean, "std": std}


def _config_kwargs(config: RunConfig) -> dict:
    return {f.name: getattr(config, f.name) for f in dataclasses.fields(RunConfig)}


def run_ablation(spec, seeds=None) -> list:
    """One row per grid configuration: sharpe, sortino, delta vs base."""
    rows = []
    base_sharpe = None
    for name, config in spec:
        if seeds is None:
            aggregate = run_seeds(config, [config.seed])
        else:
            aggregate = run_seeds(config, seeds)
        sharpe = aggregate["mean"]["sharpe"]
        if name == "base":
            base_sharpe = sharpe
        delta = (
            None if sharpe is None or base_sharpe is None else sharpe - base_sharpe
        )
        rows.append(
            {
                "configuration": name,
                "sharpe": sharpe,
                "sortino": aggregate["mean"]["sortino"],
                "delta_sharpe": delta,
            }
        )
    return rows


def run_baselines(config: RunConfig) -> dict:
    """The four reference allocators over the test split, at config costs."""
    series = build_series(config)
    runner = EpisodeRunner(config, series, ToolRegistry(config.data_dir))
    start = config.split.train + config.split.val
    stop = start + config.split.test
    out = {}
    for kind in BASELINE_KINDS:
        returns, weight_rows = [], []
        state = PortfolioState.all_cash(len(runner.tickers))
        for i in range(start, stop):
            decision = baseline_allocate(kind, runner.window(i))
            weights = decision.to_vector(runner.tickers)
            r, state = step(state, weights, runner.asset_returns(i))
            returns.append(r)
            weight_rows.append(weights)
        adjusted = apply_costs(
            np.asarray(returns, dtype=float), tuple(weight_rows), config.cost_bp
        )
        out[kind] = compute_metrics(adjusted).to_dict()
    return out

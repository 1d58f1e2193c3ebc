"""Slow-timescale diagnosis and evolution over a pluggable completion backend.

Every generative step speaks one contract: a labeled plain-text request whose
first line is ``task: <name>``, answered by a plain-text response with labeled
lines. The deterministic :class:`StubBackend` answers every task with fixed
rules so full runs reproduce byte-identically offline; :class:`HttpBackend`
posts the same documents to a real completion service.

Operations built on the contract:

* :func:`reflect` turns a window's evidence into a causal insight, a regime
  label, and a confidence score.
* :func:`evolve_memory_policy` proposes a new retrieval policy when the whole
  policy pool underperforms.
* :func:`cold_start_priors` seeds bandit priors from tool descriptions.
* :func:`planner_evolution_check` instantiates a new planner template after a
  sustained failure streak, gated by a smoke test.
* :func:`skill_extract` maintains the capped library of tool-combination
  skills used by the skill ablation.
"""

from __future__ import annotations

import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from os import environ

import numpy as np

from .errors import ConfigError, ContractError
from .memory import RetrievalPolicy, Tier
from .planners import Planner, PlannerContext, evolved_momentum_reversal, plan
from .toolkit import ToolOutput

logger = logging.getLogger(__name__)

REGIMES = ("bull", "bear", "flat", "mixed")

EVOLUTION_WINDOW_MIN = 10
EVOLUTION_EVERY = 5
EVOLUTION_REWARD_FLOOR = 0.4

PLANNER_FAILURE_STREAK = 3
PLANNER_DAMP_GRID = (0.5, 0.25, 0.75)

MAX_SKILLS = 15
SKILL_EMA_DECAY = 0.9

POLICY_TOP_K_GRID = (3, 5, 8)
POLICY_FORMAT_GRID = ("full", "ranked_truncate", "sliding_window")
TIER_ORDER = (Tier.EPISODIC, Tier.SEMANTIC, Tier.PROCEDURAL)

PRIOR_MIN, PRIOR_MAX = 0.5, 10.0

ENV_BACKEND_URL = "EVOAGENT_BACKEND_URL"
ENV_BACKEND_TOKEN = "EVOAGENT_BACKEND_TOKEN"


@dataclass(frozen=True)
class BackendConfig:
    """Transport knobs shared by both backend implementations."""

    timeout: float = 30.0
    retries: int = 3
    temperature: float = 0.3
    fail_threshold: int = 3

    def __post_init__(self) -> None:
        if self.timeout <= 0 or self.retries < 1:
            raise ConfigError("timeout must be positive and retries >= 1")
        if not (0.0 <= self.temperature <= 2.0):
            raise ConfigError(f"temperature out of range: {self.temperature}")


# ------------------------------------------------------------ data types


@dataclass(frozen=True)
class EpisodeSummary:
    """One ticker's outcome in one episode, as shown to the reflector."""

    episode: int
    ticker: str
    planner: str
    score: float
    direction_correct: bool | None = None


@dataclass(frozen=True)
class MarketSideInfo:
    """Window aggregates from cached prices, never shown to the predictor."""

    sector_returns: dict
    realized_volatility: float
    mean_cross_correlation: float

    def __post_init__(self) -> None:
        values = list(self.sector_returns.values()) + [
            self.realized_volatility,
            self.mean_cross_correlation,
        ]
        if not all(np.isfinite(v) for v in values):
            raise ContractError("market side info must be finite")

    @property
    def mean_return(self) -> float:
        if not self.sector_returns:
            return 0.0
        return float(np.mean(list(self.sector_returns.values())))


@dataclass(frozen=True)
class ReflectionInsight:
    """A causal diagnosis: text, regime label, and confidence."""

    causal_insight: str
    regime: str
    confidence: float

    def __post_init__(self) -> None:
        if self.regime not in REGIMES:
            raise ContractError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not (0.0 <= self.confidence <= 1.0):
            raise ContractError(f"confidence must lie in [0, 1], got {self.confidence}")


NEUTRAL_INSIGHT = ReflectionInsight("no diagnosis available", "flat", 0.0)


@dataclass(frozen=True)
class ReflectionRequest:
    """Everything the reflector sees about one slow window."""

    episode_summaries: tuple[EpisodeSummary, ...]
    tool_accuracy: dict
    market_side_info: MarketSideInfo
    prior_insights: tuple[ReflectionInsight, ...] = ()

    def __post_init__(self) -> None:
        if not self.episode_summaries:
            raise ContractError("reflection needs at least one episode summary")
        episodes = sorted({s.episode for s in self.episode_summaries})
        if episodes[-1] - episodes[0] + 1 != len(episodes):
            raise ContractError("episode summaries must cover one contiguous window")
        for tool, rate in self.tool_accuracy.items():
            if not (0.0 <= rate <= 1.0):
                raise ContractError(f"hit rate for {tool} out of [0, 1]: {rate}")
        if len(self.prior_insights) > 3:
            object.__setattr__(self, "prior_insights", tuple(self.prior_insights[-3:]))


@dataclass(frozen=True)
class PolicyPoolStats:
    """Posterior summary of the memory-policy bandit at a window boundary."""

    window_index: int
    mean_posterior_reward: float
    policies: tuple[RetrievalPolicy, ...]

    def __post_init__(self) -> None:
        if self.window_index < 0:
            raise ContractError(f"window index must be >= 0, got {self.window_index}")
        if not (0.0 <= self.mean_posterior_reward <= 1.0):
            raise ContractError(
                f"mean posterior reward out of [0, 1]: {self.mean_posterior_reward}"
            )


# ------------------------------------------------------ request documents


def _tiers_token(tiers) -> str:
    return "+".join(t.value for t in TIER_ORDER if t in tiers)


def render_reflection_request(request: ReflectionRequest) -> str:
    info = request.market_side_info
    lines = [
        "task: reflect",
        f"window_mean_return: {info.mean_return:.6f}",
        f"realized_volatility: {info.realized_volatility:.6f}",
        f"mean_cross_correlation: {info.mean_cross_correlation:.6f}",
    ]
    for sector in sorted(info.sector_returns):
        lines.append(f"sector_return {sector}: {info.sector_returns[sector]:.6f}")
    for tool in sorted(request.tool_accuracy):
        lines.append(f"tool_hit_rate {tool}: {request.tool_accuracy[tool]:.6f}")
    for summary in request.episode_summaries:
        correct = "-" if summary.direction_correct is None else str(summary.direction_correct).lower()
        lines.append(
            f"episode {summary.episode} {summary.ticker}: planner={summary.planner} "
            f"score={summary.score:.6f} correct={correct}"
        )
    for insight in request.prior_insights:
        lines.append(f"prior_insight [{insight.regime} {insight.confidence:.3f}]: {insight.causal_insight}")
    lines.append(
        "respond with lines 'insight: <text>', 'regime: <bull|bear|flat|mixed>', "
        "'confidence: <value in [0, 1]>'"
    )
    return "\n".join(lines)


_INSIGHT_RE = re.compile(r"^insight\s*:\s*(.+)$", re.MULTILINE)
_REGIME_RE = re.compile(r"^regime\s*:\s*(bull|bear|flat|mixed)\s*$", re.MULTILINE)
_CONFIDENCE_RE = re.compile(r"^confidence\s*:\s*(-?\d+(?:\.\d+)?)\s*$", re.MULTILINE)


def parse_insight_response(text: str) -> ReflectionInsight | None:
    insight = _INSIGHT_RE.search(text)
    regime = _REGIME_RE.search(text)
    confidence = _CONFIDENCE_RE.search(text)
    if not (insight and regime and confidence):
        return None
    value = float(confidence.group(1))
    if not (0.0 <= value <= 1.0):
        return None
    return ReflectionInsight(insight.group(1).strip(), regime.group(1), value)


# --------------------------------------------------------------- backends


class StubBackend:
    """Total, deterministic rule-based stand-in for a completion service.

    Regime calls use realized-volatility tercile cutoffs; pass the cutoffs
    calibrated on the training window (see :func:`volatility_terciles`) and
    keep them frozen thereafter. Without cutoffs all volatility counts as
    moderate.
    """

    def __init__(
        self,
        vol_terciles: tuple[float, float] | None = None,
        config: BackendConfig | None = None,
    ) -> None:
        if vol_terciles is not None and not vol_terciles[0] <= vol_terciles[1]:
            raise ConfigError(f"tercile cutoffs must be ordered, got {vol_terciles}")
        self.vol_terciles = vol_terciles
        self.config = config or BackendConfig()
        self.calls = 0

    def complete(self, request: str) -> str:
        self.calls += 1
        first = request.splitlines()[0].strip() if request else ""
        task = first.removeprefix("task:").strip() if first.startswith("task:") else ""
        handler = {
            "reflect": self._reflect,
            "credit": self._credit,
            "evolve_policy": self._evolve_policy,
            "priors": self._priors,
            "distill": self._distill,
        }.get(task)
        if handler is None:
            return f"unsupported task: {task or first!r}"
        return handler(request)

    # -- task: reflect

    def _regime(self, mean_return: float, volatility: float) -> str:
        low, high = self.vol_terciles if self.vol_terciles else (0.0, float("inf"))
        if mean_return > 0.0:
            return "bull" if volatility < high else "mixed"
        if mean_return < 0.0:
            return "bear" if volatility >= low else "flat"
        return "flat"

    def _reflect(self, request: str) -> str:
        mean_return = _first_float(request, "window_mean_return", default=0.0)
        volatility = _first_float(request, "realized_volatility", default=0.0)
        rates = {
            m.group(1): float(m.group(2))
            for m in re.finditer(
                r"^tool_hit_rate (\S+)\s*:\s*(-?\d+(?:\.\d+)?)$", request, re.MULTILINE
            )
        }
        regime = self._regime(mean_return, volatility)
        if rates:
            best = sorted(rates.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            worst = sorted(rates.items(), key=lambda kv: (kv[1], kv[0]))[0]
            confidence = min(1.0, abs(best[1] - 0.5) * 2.0)
            text = (
                f"{best[0]} was the most reliable signal ({best[1]:.2f} hit rate) "
                f"while {worst[0]} misled most ({worst[1]:.2f}); "
                f"conditions read as {regime}"
            )
        else:
            confidence = 0.0
            text = f"no tool activity this window; conditions read as {regime}"
        return f"insight: {text}\nregime: {regime}\nconfidence: {confidence:.6f}"

    # -- task: credit

    def _credit(self, request: str) -> str:
        planner = _first_float(request, "structural_planner", default=0.0)
        tools = _first_float(request, "structural_tools", default=0.0)
        memory = _first_float(request, "structural_memory", default=0.0)
        if re.search(r"^risk_warning_ignored\s*:\s*true$", request, re.MULTILINE):
            planner = max(-1.0, planner - 0.2)
        return (
            f"planner: {planner:.6f}\ntools: {tools:.6f}\nmemory: {memory:.6f}\n"
            "rationale: structural attribution adjusted for ignored risk warnings"
        )

    # -- task: evolve_policy

    def _evolve_policy(self, request: str) -> str:
        existing = set(
            re.findall(r"^existing\s*:\s*(\S+)$", request, re.MULTILINE)
        )
        for mask in range(1, 8):  # binary counting over (episodic, semantic, procedural)
            tiers = frozenset(t for i, t in enumerate(TIER_ORDER) if mask >> i & 1)
            for top_k in POLICY_TOP_K_GRID:
                for fmt in POLICY_FORMAT_GRID:
                    token = f"{_tiers_token(tiers)}|{top_k}|{fmt}"
                    if token not in existing:
                        return (
                            f"tiers: {_tiers_token(tiers)}\n"
                            f"top_k: {top_k}\nformat: {fmt}"
                        )
        return "policy: none (grid exhausted)"

    # -- task: priors

    def _priors(self, request: str) -> str:
        lines = []
        for match in re.finditer(r"^(tool|planner) (\S+)\s*:", request, re.MULTILINE):
            kind, name = match.groups()
            if kind == "planner":
                alpha, beta = 1, 1
            elif name.startswith("get_"):
                alpha, beta = 1, 2  # data-backed stubs: mildly pessimistic
            else:
                alpha, beta = 2, 1  # computational tools: mildly optimistic
            lines.append(f"prior {name}: {alpha} {beta}")
        return "\n".join(lines) if lines else "prior: none"

    # -- task: distill

    def _distill(self, request: str) -> str:
        lines = []
        pattern_re = re.compile(
            r"^pattern (\d+)\s*:\s*tool=(\S+) ticker=(\S+) correct=(\d+) "
            r"decided=(\d+) regime=(\S+)$",
            re.MULTILINE,
        )
        for m in pattern_re.finditer(request):
            idx, tool, ticker, correct, decided, regime = m.groups()
            label = "unlabeled" if regime == "-" else regime
            lines.append(
                f"text {idx}: {tool} called direction correctly "
                f"{correct}/{decided} on {ticker} ({label} regime)"
            )
        return "\n".join(lines) if lines else "text: none"


class HttpBackend:
    """POSTs request documents to the endpoint in EVOAGENT_BACKEND_URL."""

    def __init__(self, config: BackendConfig | None = None) -> None:
        self.config = config or BackendConfig()
        self.url = environ.get(ENV_BACKEND_URL, "")
        self.token = environ.get(ENV_BACKEND_TOKEN, "")
        if not self.url:
            raise ConfigError(f"{ENV_BACKEND_URL} is not set")

    def complete(self, request: str) -> str:
        headers = {"Content-Type": "text/plain; charset=utf-8"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        last_error: Exception | None = None
        for attempt in range(1, self.config.retries + 1):
            req = urllib.request.Request(
                self.url, data=request.encode("utf-8"), headers=headers, method="POST"
            )
            try:
                with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                    return resp.read().decode("utf-8")
            except (urllib.error.URLError, TimeoutError, OSError) as exc:
                last_error = exc
                logger.warning("backend attempt %d/%d failed: %s", attempt, self.config.retries, exc)
        raise ContractError(f"backend unreachable after {self.config.retries} attempts: {last_error}")


def make_backend(
    kind: str,
    vol_terciles: tuple[float, float] | None = None,
    config: BackendConfig | None = None,
):
    if kind == "stub":
        return StubBackend(vol_terciles=vol_terciles, config=config)
    if kind == "http":
        return HttpBackend(config=config)
    raise ConfigError(f"unknown backend kind {kind!r}; expected 'stub' or 'http'")


def volatility_terciles(window_volatilities) -> tuple[float, float]:
    """Tercile cutoffs of per-window realized volatility (training data only)."""
    vols = np.asarray(list(window_volatilities), dtype=float)
    if vols.size == 0 or not np.all(np.isfinite(vols)) or np.any(vols < 0):
        raise ContractError("tercile calibration needs finite non-negative volatilities")
    low, high = np.quantile(vols, [1.0 / 3.0, 2.0 / 3.0])
    return float(low), float(high)


def _first_float(text: str, label: str, default: float) -> float:
    match = re.search(rf"^{re.escape(label)}\s*:\s*(-?\d+(?:\.\d+)?)$", text, re.MULTILINE)
    return float(match.group(1)) if match else default


# --------------------------------------------------------------- reflect


def reflect(request: ReflectionRequest, backend) -> ReflectionInsight:
    """Diagnose one slow window; failures carry the previous insight forward."""
    document = render_reflection_request(request)
    insight: ReflectionInsight | None = None
    try:
        insight = parse_insight_response(backend.complete(document))
    except Exception as exc:
        logger.warning("reflection backend failed: %s", exc)
    if insight is not None:
        return insight
    if request.prior_insights:
        logger.warning("reflection response unusable; carrying previous insight forward")
        return request.prior_insights[-1]
    logger.warning("reflection response unusable and no prior insight; using neutral")
    return NEUTRAL_INSIGHT


# --------------------------------------------------- memory-policy evolution


def evolution_due(window_index: int) -> bool:
    return window_index > EVOLUTION_WINDOW_MIN and window_index % EVOLUTION_EVERY == 0


def evolve_memory_policy(
    pool_stats: PolicyPoolStats,
    insight: ReflectionInsight | None,
    backend,
) -> RetrievalPolicy | None:
    """Propose one new retrieval policy when the whole pool underperforms."""
    if not evolution_due(pool_stats.window_index):
        return None
    if pool_stats.mean_posterior_reward >= EVOLUTION_REWARD_FLOOR:
        return None
    lines = [
        "task: evolve_policy",
        f"window: {pool_stats.window_index}",
        f"mean_reward: {pool_stats.mean_posterior_reward:.6f}",
        f"regime: {insight.regime if insight else '-'}",
    ]
    for policy in pool_stats.policies:
        if policy.tiers_enabled:
            lines.append(
                f"existing: {_tiers_token(policy.tiers_enabled)}|{policy.top_k}|{policy.format}"
            )
    lines.append(
        "respond with lines 'tiers: <a+b>', 'top_k: <n>', 'format: <name>' "
        "or 'policy: none' if no new policy is warranted"
    )
    try:
        response = backend.complete("\n".join(lines))
    except Exception as exc:
        logger.warning("policy evolution backend failed: %s", exc)
        return None
    if re.search(r"^policy\s*:\s*none", response, re.MULTILINE):
        logger.warning("policy grid exhausted; no new retrieval policy")
        return None
    tiers_m = re.search(r"^tiers\s*:\s*(\S+)$", response, re.MULTILINE)
    top_k_m = re.search(r"^top_k\s*:\s*(\d+)$", response, re.MULTILINE)
    fmt_m = re.search(r"^format\s*:\s*(\S+)$", response, re.MULTILINE)
    if not (tiers_m and top_k_m and fmt_m):
        logger.warning("unparseable policy evolution response")
        return None
    serial = 1 + sum(1 for p in pool_stats.policies if p.policy_id.startswith("evolved_"))
    try:
        tiers = frozenset(Tier(t) for t in tiers_m.group(1).split("+"))
        return RetrievalPolicy(
            policy_id=f"evolved_{serial}",
            tiers_enabled=tiers,
            top_k=int(top_k_m.group(1)),
            format=fmt_m.group(1),
        )
    except (ConfigError, ValueError) as exc:
        logger.warning("evolved policy rejected: %s", exc)
        return None


# ------------------------------------------------------- cold-start priors


def cold_start_priors(
    tool_descriptions: dict,
    planner_descriptions: dict,
    backend,
) -> dict:
    """Informed (alpha0, beta0) per arm; anything invalid falls back to (1, 1)."""
    lines = ["task: priors"]
    for name in sorted(tool_descriptions):
        lines.append(f"tool {name}: {tool_descriptions[name]}")
    for name in sorted(planner_descriptions):
        lines.append(f"planner {name}: {planner_descriptions[name]}")
    lines.append("respond with one line per arm: 'prior <name>: <alpha> <beta>'")
    arms = list(tool_descriptions) + list(planner_descriptions)
    priors = {name: (1.0, 1.0) for name in arms}
    try:
        response = backend.complete("\n".join(lines))
    except Exception as exc:
        logger.warning("cold-start backend failed, uniform priors: %s", exc)
        return priors
    found = {
        m.group(1): (float(m.group(2)), float(m.group(3)))
        for m in re.finditer(
            r"^prior (\S+)\s*:\s*(-?\d+(?:\.\d+)?)\s+(-?\d+(?:\.\d+)?)$",
            response,
            re.MULTILINE,
        )
    }
    for name in arms:
        if name not in found:
            continue
        alpha, beta = found[name]
        if PRIOR_MIN <= alpha <= PRIOR_MAX and PRIOR_MIN <= beta <= PRIOR_MAX:
            priors[name] = (alpha, beta)
        else:
            logger.warning("invalid prior for %s: (%s, %s); using (1, 1)", name, alpha, beta)
    return priors


# --------------------------------------------------- planner evolution


def _smoke_context() -> PlannerContext:
    outputs = {
        ticker: {
            "compute_momentum": ToolOutput("compute_momentum", signal, 0.6, {}),
            "run_dcf_model": ToolOutput("run_dcf_model", -signal / 2, 0.5, {}),
        }
        for ticker, signal in (("SMOKE_A", 0.4), ("SMOKE_B", -0.3))
    }
    return PlannerContext(tool_outputs=outputs, prev_momentum={"SMOKE_A": -0.2, "SMOKE_B": -0.1})


def planner_evolution_check(
    failure_streaks: dict,
    existing_ids: tuple = (),
    smoke_context: PlannerContext | None = None,
    streak_threshold: int = PLANNER_FAILURE_STREAK,
) -> Planner | None:
    """New planner template once any failure streak reaches the threshold.

    The candidate must produce a valid allocation on a smoke-test context
    before it may enter the pool; a failing template is rejected (returns
    None) and the caller resets the triggering streak either way.
    """
    if not failure_streaks or max(failure_streaks.values()) < streak_threshold:
        return None
    serial = 1 + sum(1 for pid in existing_ids if pid.startswith("evolved_"))
    damp = PLANNER_DAMP_GRID[(serial - 1) % len(PLANNER_DAMP_GRID)]
    try:
        planner = evolved_momentum_reversal(f"evolved_momentum_reversal_{serial}", damp)
        decision = plan(planner, smoke_context or _smoke_context())
        total = sum(decision.weights.values()) + decision.cash
        if abs(total - 1.0) > 1e-9:
            raise ContractError(f"smoke allocation sums to {total}")
    except Exception as exc:
        logger.warning("evolved planner rejected by smoke test: %s", exc)
        return None
    return planner


# ------------------------------------------------------------ distillation


def backend_distiller(backend):
    """Adapter giving memory distillation its content strings via the backend.

    Returns a callable from pattern dicts to texts, suitable as the
    ``distiller`` hook of semantic distillation; a missing or unparseable
    response raises, which that hook treats as a non-fatal skip.
    """

    def distiller(patterns):
        lines = ["task: distill"]
        for i, pattern in enumerate(patterns):
            regime = pattern["regime"] or "-"
            lines.append(
                f"pattern {i}: tool={pattern['tool']} ticker={pattern['ticker']} "
                f"correct={pattern['correct']} decided={pattern['decided']} regime={regime}"
            )
        lines.append("respond with one line per pattern: 'text <i>: <content>'")
        response = backend.complete("\n".join(lines))
        found = {
            int(m.group(1)): m.group(2).strip()
            for m in re.finditer(r"^text (\d+)\s*:\s*(.+)$", response, re.MULTILINE)
        }
        return [found[i] for i in range(len(patterns))]

    return distiller


# ------------------------------------------------------- skill extraction


@dataclass(frozen=True)
class SkillRecord:
    """A reusable tool combination with an EMA success rate."""

    skill_id: str
    success_rate: float
    applications: int

    def __post_init__(self) -> None:
        if len(self.skill_id.split(",")) < 2:
            raise ContractError(f"skills need >= 2 tools: {self.skill_id!r}")
        if not (0.0 <= self.success_rate <= 1.0):
            raise ContractError(f"success rate out of [0, 1]: {self.success_rate}")
        if self.applications < 1:
            raise ContractError(f"applications must be >= 1, got {self.applications}")


@dataclass(frozen=True)
class SkillEvent:
    """One episode's tool set and whether its prediction was correct."""

    tools: tuple
    correct: bool


def skill_key(tools) -> str:
    return ",".join(sorted(set(tools)))


def skill_extract(events, skills: dict | None = None) -> dict:
    """Upsert sorted tool sequences; cap at 15 by evicting the lowest rate.

    New skills come only from correct predictions with at least two tools;
    later events with a known skill's tool set update its EMA either way.
    """
    updated = dict(skills or {})
    for event in events:
        if len(set(event.tools)) < 2:
            continue
        key = skill_key(event.tools)
        outcome = 1.0 if event.correct else 0.0
        if key in updated:
            old = updated[key]
            updated[key] = SkillRecord(
                key,
                SKILL_EMA_DECAY * old.success_rate + (1.0 - SKILL_EMA_DECAY) * outcome,
                old.applications + 1,
            )
        elif event.correct:
            updated[key] = SkillRecord(key, 1.0, 1)
        while len(updated) > MAX_SKILLS:
            evict = min(updated.values(), key=lambda s: (s.success_rate, s.skill_id))
            del updated[evict.skill_id]
    return updated

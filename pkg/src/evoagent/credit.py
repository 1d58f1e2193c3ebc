"""Credit assignment: from episode outcomes to bandit rewards.

The default path is the uniform mapping r = clip((s + 1) / 2, 0, 1). The
fine-grained suite adds structural credit (directional accuracy), the
counterfactual default-swap delta, the exact 3-module Shapley value over
all eight coalitions, their fixed 0.2 / 0.3 / 0.5 combination, and a
completion-backend variant that falls back to structural credit whenever
the backend response is malformed. Module rewards blend the uniform reward
with a module's credit: clip(lambda r + (1 - lambda) g, 0, 1).
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from itertools import combinations

from .errors import ContractError

logger = logging.getLogger(__name__)

MODULES = ("planner", "tools", "memory")

FCC_WEIGHTS = {"structural": 0.2, "counterfactual": 0.3, "shapley": 0.5}

DEFAULT_BLEND_LAMBDA = 0.5


def _check_range(name: str, value: float, lo: float, hi: float) -> float:
    v = float(value)
    if not math.isfinite(v) or v < lo or v > hi:
        raise ContractError(f"{name} must lie in [{lo}, {hi}], got {value!r}")
    return v


@dataclass(frozen=True)
class CreditVector:
    g_planner: float
    g_tools: float
    g_memory: float

    def __post_init__(self) -> None:
        for name in MODULES:
            _check_range(f"g_{name}", getattr(self, f"g_{name}"), -1.0, 1.0)

    def component(self, module: str) -> float:
        if module not in MODULES:
            raise ContractError(f"unknown module {module!r}")
        return getattr(self, f"g_{module}")

    def as_dict(self) -> dict:
        return {m: self.component(m) for m in MODULES}


@dataclass(frozen=True)
class PlannerTrace:
    steps_fraction: float  # completed steps / planned steps
    prediction_correct: bool

    def __post_init__(self) -> None:
        _check_range("steps_fraction", self.steps_fraction, 0.0, 1.0)


@dataclass(frozen=True)
class EpisodeOutcome:
    score: float
    per_tool_hits: dict
    planner_trace: PlannerTrace
    memory_usefulness: float

    def __post_init__(self) -> None:
        _check_range("score", self.score, -1.0, 1.0)
        _check_range("memory_usefulness", self.memory_usefulness, 0.0, 1.0)
        for tool, counts in self.per_tool_hits.items():
            if counts["correct"] + counts["incorrect"] > counts["total"]:
                raise ContractError(f"hit counts exceed total for {tool}")


def uniform_reward(s: float) -> float:
    """Affine map of the outcome score onto [0, 1]."""
    _check_range("outcome score", s, -1.0, 1.0)
    return min(1.0, max(0.0, (s + 1.0) / 2.0))


def structural_credit(outcome: EpisodeOutcome) -> CreditVector:
    """Directional-accuracy credit per module."""
    total = sum(c["total"] for c in outcome.per_tool_hits.values())
    if total == 0:
        g_tools = 0.0
    else:
        correct = sum(c["correct"] for c in outcome.per_tool_hits.values())
        incorrect = sum(c["incorrect"] for c in outcome.per_tool_hits.values())
        g_tools = (correct - incorrect) / total
    trace = outcome.planner_trace
    g_planner = 0.5 * trace.steps_fraction + 0.5 * (1.0 if trace.prediction_correct else -1.0)
    g_memory = 2.0 * outcome.memory_usefulness - 1.0

    def clip(x: float) -> float:
        return min(1.0, max(-1.0, x))

    return CreditVector(clip(g_planner), clip(g_tools), clip(g_memory))


def counterfactual_credit(outcome: EpisodeOutcome, module: str, replay) -> float:
    """Actual score minus the default-swap replay score, clipped to [-1, 1].

    ``replay(module)`` re-runs the episode with that module replaced by its
    default (policy "compressed", planner "sequential", the full tool set)
    against cached tool outputs. An infeasible replay yields credit 0.
    """
    if module not in MODULES:
        raise ContractError(f"unknown module {module!r}")
    try:
        counterfactual = replay(module)
    except Exception as exc:
        logger.warning("counterfactual replay infeasible for %s: %s", module, exc)
        return 0.0
    if counterfactual is None:
        logger.warning("counterfactual replay unavailable for %s", module)
        return 0.0
    delta = outcome.score - _check_range("replay score", counterfactual, -1.0, 1.0)
    return min(1.0, max(-1.0, delta))


@dataclass(frozen=True)
class CharacteristicFunction:
    """Coalition values for every subset of {planner, tools, memory}."""

    v: dict

    def __post_init__(self) -> None:
        normalized = {}
        for key, value in self.v.items():
            coalition = frozenset(key)
            unknown = coalition - set(MODULES)
            if unknown:
                raise ContractError(f"unknown modules in coalition: {sorted(unknown)}")
            normalized[coalition] = float(value)
        expected = all_coalitions()
        missing = [c for c in expected if c not in normalized]
        if missing:
            raise ContractError(
                f"characteristic function missing coalitions: "
                f"{[sorted(c) for c in missing]}"
            )
        object.__setattr__(self, "v", normalized)

    def value(self, coalition) -> float:
        return self.v[frozenset(coalition)]


def all_coalitions() -> list[frozenset]:
    out = []
    for size in range(len(MODULES) + 1):
        for combo in combinations(MODULES, size):
            out.append(frozenset(combo))
    return out


def shapley_credit(v: CharacteristicFunction) -> CreditVector:
    """Exact Shapley value by full coalition enumeration (n = 3)."""
    n = len(MODULES)
    values = {}
    for module in MODULES:
        others = [m for m in MODULES if m != module]
        phi = 0.0
        for size in range(len(others) + 1):
            for combo in combinations(others, size):
                s = frozenset(combo)
                weight = (
                    math.factorial(len(s)) * math.factorial(n - len(s) - 1) / math.factorial(n)
                )
                phi += weight * (v.value(s | {module}) - v.value(s))
        values[module] = phi
    return CreditVector(values["planner"], values["tools"], values["memory"])


def fcc_combine(
    struct: CreditVector, counter: CreditVector, shap: CreditVector
) -> CreditVector:
    """Fixed-weight blend 0.2 structural + 0.3 counterfactual + 0.5 Shapley."""
    out = []
    for module in MODULES:
        mixed = (
            FCC_WEIGHTS["structural"] * struct.component(module)
            + FCC_WEIGHTS["counterfactual"] * counter.component(module)
            + FCC_WEIGHTS["shapley"] * shap.component(module)
        )
        out.append(min(1.0, max(-1.0, mixed)))
    return CreditVector(*out)


def module_reward(r: float, g: float, blend_lambda: float = DEFAULT_BLEND_LAMBDA) -> float:
    """Blend the uniform reward with a module's credit, clipped to [0, 1]."""
    _check_range("uniform reward", r, 0.0, 1.0)
    _check_range("credit", g, -1.0, 1.0)
    _check_range("lambda", blend_lambda, 0.0, 1.0)
    return min(1.0, max(0.0, blend_lambda * r + (1.0 - blend_lambda) * g))


# ------------------------------------------------------- backend variant

CREDIT_RESPONSE_RE = re.compile(
    r"^(planner|tools|memory)\s*:\s*(-?\d+(?:\.\d+)?)", re.MULTILINE
)


def build_credit_request(outcome: EpisodeOutcome, context: dict) -> str:
    """Labeled request text a completion backend can answer (or the stub parse)."""
    struct = structural_credit(outcome)
    lines = [
        "task: credit",
        f"score: {outcome.score:.6f}",
        f"structural_planner: {struct.g_planner:.6f}",
        f"structural_tools: {struct.g_tools:.6f}",
        f"structural_memory: {struct.g_memory:.6f}",
        f"risk_warning_ignored: {str(bool(context.get('risk_warning_ignored', False))).lower()}",
    ]
    notes = context.get("notes")
    if notes:
        lines.append(f"notes: {notes}")
    lines.append(
        "respond with three lines 'planner: <v>', 'tools: <v>', 'memory: <v>', "
        "each value in [-1, 1], followed by rationales"
    )
    return "\n".join(lines)


def parse_credit_response(text: str) -> CreditVector | None:
    found = {}
    for match in CREDIT_RESPONSE_RE.finditer(text):
        found[match.group(1)] = float(match.group(2))
    if set(found) != set(MODULES):
        return None
    if any(not (-1.0 <= v <= 1.0) for v in found.values()):
        return None
    return CreditVector(found["planner"], found["tools"], found["memory"])


def llm_fcc_credit(outcome: EpisodeOutcome, context: dict, reflection_client) -> CreditVector:
    """Backend-scored credit; malformed responses fall back to structural."""
    request = build_credit_request(outcome, context)
    try:
        response = reflection_client.complete(request)
        parsed = parse_credit_response(response)
    except Exception as exc:
        logger.warning("credit backend failed (%s); using structural credit", exc)
        return structural_credit(outcome)
    if parsed is None:
        logger.warning("malformed credit response; using structural credit")
        return structural_credit(outcome)
    return parsed

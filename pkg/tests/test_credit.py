"""Tests for credit assignment."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from evoagent.credit import (
    CharacteristicFunction,
    CreditVector,
    EpisodeOutcome,
    MODULES,
    PlannerTrace,
    build_credit_request,
    counterfactual_credit,
    fcc_combine,
    llm_fcc_credit,
    module_reward,
    parse_credit_response,
    shapley_credit,
    structural_credit,
    uniform_reward,
)
from evoagent.errors import ContractError


def outcome(
    score=0.4,
    hits=None,
    steps_fraction=1.0,
    prediction_correct=True,
    memory_usefulness=0.5,
):
    return EpisodeOutcome(
        score=score,
        per_tool_hits=hits or {},
        planner_trace=PlannerTrace(steps_fraction, prediction_correct),
        memory_usefulness=memory_usefulness,
    )


def cf(values_by_subset: dict) -> CharacteristicFunction:
    return CharacteristicFunction(
        {frozenset(k): v for k, v in values_by_subset.items()}
    )


def shapley_permutation_oracle(v: CharacteristicFunction) -> dict:
    """Average marginal contribution over all 6 orderings."""
    sums = {m: 0.0 for m in MODULES}
    perms = list(itertools.permutations(MODULES))
    for order in perms:
        seen = frozenset()
        for module in order:
            sums[module] += v.value(seen | {module}) - v.value(seen)
            seen = seen | {module}
    return {m: s / len(perms) for m, s in sums.items()}


# --------------------------------------------------------------- uniform


def test_uniform_reward_endpoints():
    assert uniform_reward(0.0) == 0.5
    assert uniform_reward(1.0) == 1.0
    assert uniform_reward(-1.0) == 0.0


def test_uniform_reward_is_affine_and_monotone():
    xs = np.linspace(-1, 1, 41)
    ys = [uniform_reward(float(x)) for x in xs]
    assert all(b >= a for a, b in zip(ys, ys[1:]))
    for x in xs:
        assert math.isclose(uniform_reward(float(x)), (x + 1) / 2, abs_tol=1e-15)
    with pytest.raises(ContractError):
        uniform_reward(1.5)
    with pytest.raises(ContractError):
        uniform_reward(float("nan"))


# ------------------------------------------------------------ structural


def test_structural_tools_substitution():
    got = structural_credit(
        outcome(hits={"t1": {"correct": 8, "incorrect": 2, "total": 10}})
    )
    assert math.isclose(got.g_tools, 0.6, abs_tol=1e-15)


def test_structural_no_tools_is_zero():
    assert structural_credit(outcome(hits={})).g_tools == 0.0


def test_structural_memory_midpoint():
    assert structural_credit(outcome(memory_usefulness=0.5)).g_memory == 0.0
    assert structural_credit(outcome(memory_usefulness=1.0)).g_memory == 1.0
    assert structural_credit(outcome(memory_usefulness=0.0)).g_memory == -1.0


def test_structural_planner_blend():
    full_right = structural_credit(outcome(steps_fraction=1.0, prediction_correct=True))
    assert full_right.g_planner == 1.0
    full_wrong = structural_credit(outcome(steps_fraction=1.0, prediction_correct=False))
    assert full_wrong.g_planner == 0.0
    none_wrong = structural_credit(outcome(steps_fraction=0.0, prediction_correct=False))
    assert none_wrong.g_planner == -0.5


def test_structural_aggregates_across_tools():
    got = structural_credit(
        outcome(
            hits={
                "a": {"correct": 3, "incorrect": 1, "total": 5},
                "b": {"correct": 0, "incorrect": 4, "total": 5},
            }
        )
    )
    assert math.isclose(got.g_tools, (3 - 5) / 10, abs_tol=1e-15)


def test_outcome_validation():
    with pytest.raises(ContractError):
        outcome(score=1.2)
    with pytest.raises(ContractError):
        outcome(hits={"t": {"correct": 5, "incorrect": 6, "total": 10}})
    with pytest.raises(ContractError):
        PlannerTrace(1.4, True)
    with pytest.raises(ContractError):
        CreditVector(0.0, 2.0, 0.0)


# -------------------------------------------------------- counterfactual


def test_counterfactual_identical_replay_is_zero():
    assert counterfactual_credit(outcome(score=0.4), "memory", lambda m: 0.4) == 0.0


def test_counterfactual_substitution_and_clip():
    assert math.isclose(
        counterfactual_credit(outcome(score=0.4), "planner", lambda m: -0.2), 0.6
    )
    assert counterfactual_credit(outcome(score=-1.0), "tools", lambda m: 1.0) == -1.0


def test_counterfactual_infeasible_replay_warns_and_zeroes(caplog):
    def broken(module):
        raise KeyError("cache miss")

    with caplog.at_level("WARNING"):
        got = counterfactual_credit(outcome(score=0.4), "memory", broken)
    assert got == 0.0
    assert any("infeasible" in r.message for r in caplog.records)
    with caplog.at_level("WARNING"):
        assert counterfactual_credit(outcome(score=0.4), "memory", lambda m: None) == 0.0
    with pytest.raises(ContractError):
        counterfactual_credit(outcome(), "optimizer", lambda m: 0.0)


# ----------------------------------------------------------------- Shapley


def test_shapley_dummy_player_axiom():
    v = cf(
        {
            (): 0.0,
            ("planner",): 0.6,
            ("tools",): 0.0,
            ("memory",): 0.0,
            ("planner", "tools"): 0.6,
            ("planner", "memory"): 0.6,
            ("tools", "memory"): 0.0,
            ("planner", "tools", "memory"): 0.6,
        }
    )
    got = shapley_credit(v)
    assert math.isclose(got.g_planner, 0.6, abs_tol=1e-15)
    assert got.g_tools == 0.0
    assert got.g_memory == 0.0


def test_shapley_symmetry_axiom():
    v = cf(
        {
            (): 0.0,
            ("planner",): 1 / 3,
            ("tools",): 1 / 3,
            ("memory",): 1 / 3,
            ("planner", "tools"): 2 / 3,
            ("planner", "memory"): 2 / 3,
            ("tools", "memory"): 2 / 3,
            ("planner", "tools", "memory"): 1.0,
        }
    )
    got = shapley_credit(v)
    for m in MODULES:
        assert math.isclose(got.component(m), 1 / 3, abs_tol=1e-15)


def test_shapley_specific_case_against_permutation_oracle():
    v = cf(
        {
            (): 0.0,
            ("planner",): 0.2,
            ("tools",): 0.1,
            ("memory",): 0.0,
            ("planner", "tools"): 0.5,
            ("planner", "memory"): 0.3,
            ("tools", "memory"): 0.2,
            ("planner", "tools", "memory"): 0.6,
        }
    )
    got = shapley_credit(v)
    oracle = shapley_permutation_oracle(v)
    for m in MODULES:
        assert abs(got.component(m) - oracle[m]) < 1e-12
    assert math.isclose(sum(oracle.values()), 0.6, abs_tol=1e-12)


def test_shapley_efficiency_on_randomized_functions():
    rng = np.random.Generator(np.random.PCG64(13))
    for _ in range(100):
        values = {c: float(rng.uniform(-0.5, 0.8)) for c in
                  [(), ("planner",), ("tools",), ("memory",),
                   ("planner", "tools"), ("planner", "memory"),
                   ("tools", "memory"), ("planner", "tools", "memory")]}
        # Keep per-module Shapley inside the CreditVector range.
        v = cf(values)
        oracle = shapley_permutation_oracle(v)
        if any(abs(x) > 1.0 for x in oracle.values()):
            continue
        got = shapley_credit(v)
        total = got.g_planner + got.g_tools + got.g_memory
        grand = v.value(MODULES) - v.value(())
        assert abs(total - grand) < 1e-12
        for m in MODULES:
            assert abs(got.component(m) - oracle[m]) < 1e-12


def test_characteristic_function_requires_all_coalitions():
    with pytest.raises(ContractError):
        cf({(): 0.0, ("planner",): 0.5})
    with pytest.raises(ContractError):
        cf({(): 0.0, ("planner", "oracle"): 0.5})


# ------------------------------------------------------------ combination


def test_fcc_equal_inputs_identity():
    x = CreditVector(0.4, -0.2, 0.9)
    got = fcc_combine(x, x, x)
    for m in MODULES:
        assert math.isclose(got.component(m), x.component(m), abs_tol=1e-15)


def test_fcc_basis_weights():
    got = fcc_combine(
        CreditVector(1.0, 0.0, 0.0),
        CreditVector(0.0, 1.0, 0.0),
        CreditVector(0.0, 0.0, 1.0),
    )
    assert math.isclose(got.g_planner, 0.2, abs_tol=1e-15)
    assert math.isclose(got.g_tools, 0.3, abs_tol=1e-15)
    assert math.isclose(got.g_memory, 0.5, abs_tol=1e-15)


def test_fcc_zeros():
    z = CreditVector(0.0, 0.0, 0.0)
    assert fcc_combine(z, z, z).as_dict() == {"planner": 0.0, "tools": 0.0, "memory": 0.0}


# ---------------------------------------------------------- module reward


def test_module_reward_substitution():
    assert math.isclose(module_reward(0.8, 0.2, 0.5), 0.5, abs_tol=1e-15)
    assert module_reward(0.8, -1.0, 1.0) == 0.8
    assert module_reward(0.1, -1.0, 0.5) == 0.0


def test_module_reward_always_in_unit_interval():
    rng = np.random.Generator(np.random.PCG64(3))
    for _ in range(300):
        r = float(rng.uniform())
        g = float(rng.uniform(-1, 1))
        lam = float(rng.uniform())
        got = module_reward(r, g, lam)
        assert 0.0 <= got <= 1.0
    with pytest.raises(ContractError):
        module_reward(1.2, 0.0)
    with pytest.raises(ContractError):
        module_reward(0.5, -1.5)


# -------------------------------------------------------------- LLM credit


class ScriptedBackend:
    def __init__(self, response):
        self.response = response
        self.requests = []

    def complete(self, prompt: str) -> str:
        self.requests.append(prompt)
        return self.response


def test_llm_credit_parses_well_formed_response():
    backend = ScriptedBackend("planner: -0.6\ntools: 0.3\nmemory: 0.4\nrationale: fine")
    got = llm_fcc_credit(outcome(), {}, backend)
    assert got == CreditVector(-0.6, 0.3, 0.4)
    assert "task: credit" in backend.requests[0]


def test_llm_credit_malformed_falls_back_to_structural(caplog):
    base = structural_credit(outcome())
    with caplog.at_level("WARNING"):
        got = llm_fcc_credit(outcome(), {}, ScriptedBackend("no scores here"))
    assert got == base
    assert any("structural" in r.message for r in caplog.records)
    # Out-of-range values are also malformed.
    got = llm_fcc_credit(outcome(), {}, ScriptedBackend("planner: 2.0\ntools: 0\nmemory: 0"))
    assert got == base


def test_llm_credit_backend_exception_falls_back(caplog):
    class Down:
        def complete(self, prompt):
            raise ConnectionError("backend offline")

    with caplog.at_level("WARNING"):
        got = llm_fcc_credit(outcome(), {}, Down())
    assert got == structural_credit(outcome())


def test_credit_request_carries_context_flag():
    req = build_credit_request(outcome(), {"risk_warning_ignored": True})
    assert "risk_warning_ignored: true" in req
    req = build_credit_request(outcome(), {})
    assert "risk_warning_ignored: false" in req
    assert parse_credit_response("planner: 0.1\ntools: -0.2\nmemory: 0.0") == CreditVector(
        0.1, -0.2, 0.0
    )
    assert parse_credit_response("planner: 0.1") is None

"""Online selection mechanisms.

Three selectors drive the fast timescale:

* :class:`ThompsonSelector`: Beta-posterior Thompson Sampling over an
  ordered arm pool (memory retrieval policies).
* :class:`LinUCBPool`: contextual UCB selection over planners with a
  7-dimensional context vector.
* :class:`PerToolSelector`: Thompson Sampling that keeps the top-K sampled
  tools, K shrinking on a linear schedule.

All tie-breaks resolve to the lowest arm index and every random draw comes
from an injected ``numpy`` Generator, so identical state plus identical seed
reproduces the selection sequence exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, FrozenStateError

CONTEXT_DIM = 7

# Feature order for the planner-selection context vector.
CONTEXT_FEATURES = (
    "sector_code",
    "volatility_30d",
    "log_market_cap",
    "data_richness",
    "momentum",
    "options_availability",
    "analyst_coverage",
)


def _check_reward(reward: float) -> float:
    # Contract check, not a silent clip: out-of-range rewards indicate a
    # credit-pipeline bug upstream.
    r = float(reward)
    if not math.isfinite(r) or r < 0.0 or r > 1.0:
        raise ContractError(f"reward must lie in [0, 1], got {reward!r}")
    return r


@dataclass
class BetaArm:
    """Beta(alpha, beta) posterior over one arm's success probability."""

    arm_id: str
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ContractError(
                f"Beta parameters must be positive, got ({self.alpha}, {self.beta})"
            )

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)


def ts_update(arm: BetaArm, reward: float) -> BetaArm:
    """Posterior update: alpha += r, beta += 1 - r."""
    r = _check_reward(reward)
    return replace(arm, alpha=arm.alpha + r, beta=arm.beta + (1.0 - r))


class ThompsonSelector:
    """Thompson Sampling over an ordered pool of Beta arms."""

    def __init__(self, arms: list[BetaArm], rng: np.random.Generator):
        ids = [a.arm_id for a in arms]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate arm ids: {ids}")
        self.arms: list[BetaArm] = list(arms)
        self.rng = rng
        self.frozen = False

    def _index(self, arm_id: str) -> int:
        for i, arm in enumerate(self.arms):
            if arm.arm_id == arm_id:
                return i
        raise ConfigError(f"unknown arm {arm_id!r}")

    def sample(self) -> np.ndarray:
        if not self.arms:
            raise ConfigError("cannot sample from an empty arm pool")
        alphas = np.array([a.alpha for a in self.arms])
        betas = np.array([a.beta for a in self.arms])
        return self.rng.beta(alphas, betas)

    def select(self) -> str:
        """Sample every arm's posterior and return the argmax arm id.

        Ties break to the lowest arm index (np.argmax takes the first max).
        """
        return self.arms[int(np.argmax(self.sample()))].arm_id

    def select_top_k(self, k: int) -> list[str]:
        """Ids of the k highest-sampled arms, in descending sample order."""
        samples = self.sample()
        # Stable ordering: sort by (-sample, index).
        order = sorted(range(len(samples)), key=lambda i: (-samples[i], i))
        return [self.arms[i].arm_id for i in order[: max(0, int(k))]]

    def update(self, arm_id: str, reward: float) -> None:
        if self.frozen:
            raise FrozenStateError("posterior update on a frozen selector")
        i = self._index(arm_id)
        self.arms[i] = ts_update(self.arms[i], reward)

    def add_arm(self, arm: BetaArm) -> None:
        if self.frozen:
            raise FrozenStateError("arm added to a frozen selector")
        if any(a.arm_id == arm.arm_id for a in self.arms):
            raise ConfigError(f"duplicate arm id {arm.arm_id!r}")
        self.arms.append(arm)

    def freeze(self) -> None:
        self.frozen = True

    def mean_posterior_reward(self) -> float:
        """Mean of per-arm posterior means (the policy-pool health signal)."""
        if not self.arms:
            raise ConfigError("empty arm pool")
        return float(np.mean([a.mean for a in self.arms]))

    def clone(self, rng: np.random.Generator) -> "ThompsonSelector":
        """Copy of posterior state with a fresh RNG stream (for checkpoints)."""
        return ThompsonSelector([replace(a) for a in self.arms], rng)

    def snapshot(self) -> dict:
        """Posterior state as a canonical-JSON-friendly document."""
        return {
            "arms": [
                {"arm_id": a.arm_id, "alpha": a.alpha, "beta": a.beta}
                for a in self.arms
            ]
        }


def ts_select(selector: ThompsonSelector) -> str:
    return selector.select()


@dataclass
class ContextVector:
    """Finite 1-D context; planner selection uses the 7 CONTEXT_FEATURES."""

    phi: np.ndarray

    def __post_init__(self) -> None:
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.ndim != 1 or self.phi.size == 0:
            raise ContractError("context must be a non-empty 1-D vector")
        if not np.all(np.isfinite(self.phi)):
            raise ContractError("context entries must be finite")

    @classmethod
    def from_features(
        cls,
        sector_code: float,
        volatility_30d: float,
        log_market_cap: float,
        data_richness: float,
        momentum: float,
        options_availability: float,
        analyst_coverage: float,
    ) -> "ContextVector":
        return cls(
            np.array(
                [
                    sector_code,
                    volatility_30d,
                    log_market_cap,
                    data_richness,
                    momentum,
                    options_availability,
                    analyst_coverage,
                ],
                dtype=float,
            )
        )


@dataclass
class LinUCBArm:
    """Per-planner ridge-regression state: A = I + sum(phi phi^T), b = sum(r phi)."""

    arm_id: str
    A: np.ndarray
    b: np.ndarray
    theta_hat: np.ndarray

    @classmethod
    def fresh(cls, arm_id: str, dim: int = CONTEXT_DIM) -> "LinUCBArm":
        return cls(arm_id, np.eye(dim), np.zeros(dim), np.zeros(dim))


def linucb_update(arm: LinUCBArm, phi: ContextVector, reward: float) -> LinUCBArm:
    """Rank-one update; theta_hat re-solved from A theta = b for robustness."""
    r = _check_reward(reward)
    x = phi.phi
    if x.shape[0] != arm.A.shape[0]:
        raise ContractError("context dimension does not match arm state")
    A = arm.A + np.outer(x, x)
    b = arm.b + r * x
    theta = np.linalg.solve(A, b)
    return LinUCBArm(arm.arm_id, A, b, theta)


def linucb_select(arms: list[LinUCBArm], phi: ContextVector, alpha_explore: float = 1.0) -> str:
    """Arm with the highest UCB score phi.theta + alpha sqrt(phi A^-1 phi)."""
    if not arms:
        raise ConfigError("cannot select from an empty arm pool")
    if alpha_explore < 0:
        raise ContractError("exploration coefficient must be non-negative")
    x = phi.phi
    scores = np.empty(len(arms))
    for i, arm in enumerate(arms):
        if x.shape[0] != arm.A.shape[0]:
            raise ContractError("context dimension does not match arm state")
        bonus = float(x @ np.linalg.solve(arm.A, x))
        # A is SPD so the quadratic form is >= 0; clamp tiny negative roundoff.
        scores[i] = float(x @ arm.theta_hat) + alpha_explore * math.sqrt(max(bonus, 0.0))
    return arms[int(np.argmax(scores))].arm_id


class LinUCBPool:
    """Keyed collection of LinUCB arms with freeze semantics."""

    def __init__(self, arm_ids: list[str], dim: int = CONTEXT_DIM, alpha_explore: float = 1.0):
        if len(set(arm_ids)) != len(arm_ids):
            raise ConfigError(f"duplicate arm ids: {arm_ids}")
        self.arms = [LinUCBArm.fresh(a, dim) for a in arm_ids]
        self.alpha_explore = float(alpha_explore)
        self.frozen = False

    def select(self, phi: ContextVector) -> str:
        return linucb_select(self.arms, phi, self.alpha_explore)

    def update(self, arm_id: str, phi: ContextVector, reward: float) -> None:
        if self.frozen:
            raise FrozenStateError("LinUCB update on a frozen pool")
        for i, arm in enumerate(self.arms):
            if arm.arm_id == arm_id:
                self.arms[i] = linucb_update(arm, phi, reward)
                return
        raise ConfigError(f"unknown arm {arm_id!r}")

    def add_arm(self, arm_id: str) -> None:
        if self.frozen:
            raise FrozenStateError("arm added to a frozen pool")
        if any(a.arm_id == arm_id for a in self.arms):
            raise ConfigError(f"duplicate arm id {arm_id!r}")
        dim = self.arms[0].A.shape[0] if self.arms else CONTEXT_DIM
        self.arms.append(LinUCBArm.fresh(arm_id, dim))

    def freeze(self) -> None:
        self.frozen = True

    def clone(self) -> "LinUCBPool":
        pool = LinUCBPool([], alpha_explore=self.alpha_explore)
        pool.arms = [
            LinUCBArm(a.arm_id, a.A.copy(), a.b.copy(), a.theta_hat.copy())
            for a in self.arms
        ]
        return pool

    def snapshot(self) -> dict:
        return {
            "alpha_explore": self.alpha_explore,
            "arms": [
                {
                    "arm_id": a.arm_id,
                    "A": a.A.tolist(),
                    "b": a.b.tolist(),
                    "theta_hat": a.theta_hat.tolist(),
                }
                for a in self.arms
            ],
        }


@dataclass
class PerToolSelectorConfig:
    """Linear shrink schedule for top-K tool selection."""

    k_initial: int = 12
    k_min: int = 6
    shrink_every: int = 40

    def __post_init__(self) -> None:
        if self.k_min <= 0 or self.k_initial < self.k_min or self.shrink_every <= 0:
            raise ConfigError(
                f"invalid per-tool schedule ({self.k_initial}, {self.k_min}, {self.shrink_every})"
            )

    def k_at(self, episode_index: int) -> int:
        if episode_index < 0:
            raise ContractError("episode index must be non-negative")
        return max(self.k_min, self.k_initial - episode_index // self.shrink_every)


def per_tool_select(
    tool_arms: list[BetaArm],
    config: PerToolSelectorConfig,
    episode_index: int,
    rng: np.random.Generator,
) -> set[str]:
    """The K(episode) highest-sampled tool arms."""
    k = config.k_at(episode_index)
    if k > len(tool_arms):
        raise ConfigError(f"K={k} exceeds the {len(tool_arms)} available tools")
    selector = ThompsonSelector(tool_arms, rng)
    return set(selector.select_top_k(k))


class PerToolSelector:
    """Per-tool Thompson Sampling with the shrinking top-K schedule."""

    def __init__(self, tool_names: list[str], config: PerToolSelectorConfig, rng: np.random.Generator,
                 priors: dict[str, tuple[float, float]] | None = None):
        priors = priors or {}
        arms = [
            BetaArm(name, *priors.get(name, (1.0, 1.0)))
            for name in tool_names
        ]
        self.config = config
        self._selector = ThompsonSelector(arms, rng)

    @property
    def arms(self) -> list[BetaArm]:
        return self._selector.arms

    @property
    def frozen(self) -> bool:
        return self._selector.frozen

    def select(self, episode_index: int) -> set[str]:
        k = self.config.k_at(episode_index)
        if k > len(self.arms):
            raise ConfigError(f"K={k} exceeds the {len(self.arms)} available tools")
        return set(self._selector.select_top_k(k))

    def update(self, tool_name: str, reward: float) -> None:
        self._selector.update(tool_name, reward)

    def freeze(self) -> None:
        self._selector.freeze()

    def clone(self, rng: np.random.Generator) -> "PerToolSelector":
        copy = PerToolSelector([], self.config, rng)
        copy._selector = self._selector.clone(rng)
        return copy

    def snapshot(self) -> dict:
        return self._selector.snapshot()

"""Three-tier evolving memory.

Episodic entries record raw per-episode outcomes, semantic entries hold
patterns distilled across a window, and procedural entries are promoted
high-confidence rules. Retrieval is policy-guided: the policy says which
tiers are visible, how many entries return, and how the context string is
formatted; within the policy, entries rank by the composite relevance

    r(q, e) = f_match(q, e) * (0.5 + 0.5 q_e) * (0.3 + 0.7 exp(-0.01 D)) * b_tier

with D the entry age in episodes and tier boosts 1.0 / 1.2 / 1.5.

Feature-match bonuses: same ticker +2.0, same sector +1.0, +0.5 per shared
tool, same regime +0.5; an entry matching nothing scores a 0.1 floor.
Promotion copies a semantic entry to the procedural tier once it has
quality >= 0.8 and has persisted two distillation cycles; the copy's
created_at is the promotion episode. Eviction removes the lowest-quality
entry (oldest, then smallest id, among ties). Token budgets are measured
in characters. Procedural rules are plain text lines injected into planner
context; they never execute code.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum

from .canonical import state_hash
from .errors import ConfigError, ContractError, FrozenStateError

logger = logging.getLogger(__name__)

RECENCY_DECAY = 0.01
DEFAULT_TOP_K = 5
DEFAULT_QUALITY_THRESHOLD = 0.3
DEFAULT_TOKEN_BUDGET = 2000
WRITE_QUALITY_THRESHOLD = 0.3
PROMOTION_THRESHOLD = 0.8
PROMOTION_CYCLES = 2
TIER_CAPACITY = 500


class Tier(str, Enum):
    EPISODIC = "episodic"
    SEMANTIC = "semantic"
    PROCEDURAL = "procedural"


TIER_BOOSTS = {Tier.EPISODIC: 1.0, Tier.SEMANTIC: 1.2, Tier.PROCEDURAL: 1.5}

FORMATS = ("none", "sliding_window", "full", "ranked_truncate")


@dataclass(frozen=True)
class MemoryEntry:
    entry_id: str
    tier: Tier
    ticker: str
    sector: str
    tools_used: frozenset[str]
    content: str
    quality: float
    created_at: int
    regime: str | None = None

    def __post_init__(self) -> None:
        if not (0.0 <= self.quality <= 1.0):
            raise ContractError(f"quality must lie in [0, 1], got {self.quality}")
        if self.created_at < 0:
            raise ContractError(f"created_at must be >= 0, got {self.created_at}")
        object.__setattr__(self, "tools_used", frozenset(self.tools_used))
        object.__setattr__(self, "tier", Tier(self.tier))


@dataclass(frozen=True)
class MemoryQuery:
    ticker: str
    sector: str
    tools: frozenset[str]
    current_episode: int
    regime: str | None = None

    def __post_init__(self) -> None:
        if self.current_episode < 0:
            raise ContractError("current_episode must be >= 0")
        object.__setattr__(self, "tools", frozenset(self.tools))


def match_bonus(query: MemoryQuery, entry: MemoryEntry) -> float:
    """Additive feature-match bonuses with a 0.1 no-match floor."""
    bonus = 0.0
    if entry.ticker == query.ticker:
        bonus += 2.0
    if entry.sector == query.sector:
        bonus += 1.0
    bonus += 0.5 * len(entry.tools_used & query.tools)
    if entry.regime is not None and entry.regime == query.regime:
        bonus += 0.5
    return bonus if bonus > 0.0 else 0.1


def relevance_score(query: MemoryQuery, entry: MemoryEntry) -> float:
    if entry.created_at > query.current_episode:
        raise ContractError(
            f"entry from episode {entry.created_at} scored at episode {query.current_episode}"
        )
    delta = query.current_episode - entry.created_at
    quality_factor = 0.5 + 0.5 * entry.quality
    recency_factor = 0.3 + 0.7 * math.exp(-RECENCY_DECAY * delta)
    return match_bonus(query, entry) * quality_factor * recency_factor * TIER_BOOSTS[entry.tier]


@dataclass(frozen=True)
class RetrievalPolicy:
    """What the memory bandit selects: visible tiers, count, and formatting."""

    policy_id: str
    tiers_enabled: frozenset[Tier]
    top_k: int
    format: str
    quality_threshold: float = DEFAULT_QUALITY_THRESHOLD
    token_budget: int = DEFAULT_TOKEN_BUDGET

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "tiers_enabled", frozenset(Tier(t) for t in self.tiers_enabled)
        )
        if self.format not in FORMATS:
            raise ConfigError(f"unknown format {self.format!r}")
        disabled = (self.format == "none", not self.tiers_enabled, self.top_k == 0)
        if any(disabled) and not all(disabled):
            raise ConfigError(
                "format 'none', empty tiers, and top_k 0 must occur together: "
                f"{self.policy_id}"
            )
        if self.top_k < 0:
            raise ConfigError(f"top_k must be >= 0, got {self.top_k}")
        if not (0.0 <= self.quality_threshold <= 1.0):
            raise ConfigError(
                f"quality_threshold must lie in [0, 1], got {self.quality_threshold}"
            )
        if self.token_budget <= 0:
            raise ConfigError(f"token_budget must be positive, got {self.token_budget}")


ALL_TIERS = frozenset((Tier.EPISODIC, Tier.SEMANTIC, Tier.PROCEDURAL))


def default_policies() -> list[RetrievalPolicy]:
    """The five initial retrieval policies the bandit starts from."""
    return [
        RetrievalPolicy("none", frozenset(), 0, "none"),
        RetrievalPolicy("recent_window", frozenset((Tier.EPISODIC,)), DEFAULT_TOP_K, "sliding_window"),
        RetrievalPolicy("full_detailed", ALL_TIERS, DEFAULT_TOP_K, "full"),
        RetrievalPolicy(
            "compressed", frozenset((Tier.SEMANTIC, Tier.PROCEDURAL)), DEFAULT_TOP_K, "ranked_truncate"
        ),
        RetrievalPolicy(
            "aggressive_learner",
            ALL_TIERS,
            8,
            "ranked_truncate",
            quality_threshold=0.2,
            token_budget=2 * DEFAULT_TOKEN_BUDGET,
        ),
    ]


class MemoryStore:
    """Three per-tier ordered collections with capacity 500 and freeze flag."""

    def __init__(self, capacity: int = TIER_CAPACITY):
        if capacity <= 0:
            raise ConfigError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.read_only = False
        self._tiers: dict[Tier, list[MemoryEntry]] = {t: [] for t in Tier}
        self._ids: set[str] = set()
        self._write_counter = 0

    def entries(self, tier: Tier) -> tuple[MemoryEntry, ...]:
        return tuple(self._tiers[Tier(tier)])

    def size(self, tier: Tier) -> int:
        return len(self._tiers[Tier(tier)])

    def freeze(self) -> None:
        self.read_only = True

    def _check_writable(self) -> None:
        if self.read_only:
            raise FrozenStateError("write attempted on a read-only memory store")

    def add(self, entry: MemoryEntry) -> None:
        """Raw insert with capacity eviction; write_episodic gates quality."""
        self._check_writable()
        if entry.entry_id in self._ids:
            raise ConfigError(f"duplicate entry id {entry.entry_id!r}")
        bucket = self._tiers[entry.tier]
        bucket.append(entry)
        self._ids.add(entry.entry_id)
        if len(bucket) > self.capacity:
            evicted = min(bucket, key=lambda e: (e.quality, e.created_at, e.entry_id))
            bucket.remove(evicted)
            self._ids.discard(evicted.entry_id)
            logger.debug("evicted %s from %s tier", evicted.entry_id, entry.tier.value)

    def clone(self) -> "MemoryStore":
        """Independent copy; the immutable entries themselves are shared."""
        copy = MemoryStore(self.capacity)
        copy.read_only = self.read_only
        copy._tiers = {tier: list(bucket) for tier, bucket in self._tiers.items()}
        copy._ids = set(self._ids)
        copy._write_counter = self._write_counter
        return copy

    def snapshot(self) -> dict:
        doc: dict = {
            "capacity": self.capacity,
            "read_only": self.read_only,
            "write_counter": self._write_counter,
            "tiers": {},
        }
        for tier in Tier:
            doc["tiers"][tier.value] = [
                {
                    "entry_id": e.entry_id,
                    "tier": e.tier.value,
                    "ticker": e.ticker,
                    "sector": e.sector,
                    "tools_used": sorted(e.tools_used),
                    "content": e.content,
                    "quality": e.quality,
                    "created_at": e.created_at,
                    "regime": e.regime,
                }
                for e in sorted(self._tiers[tier], key=lambda e: e.entry_id)
            ]
        return doc

    def content_hash(self) -> str:
        return state_hash(self.snapshot())


def episodic_quality(outcome: float) -> float:
    """Map the episode outcome s in [-1, 1] onto a write quality in [0, 1]."""
    return float(min(1.0, max(0.0, (outcome + 1.0) / 2.0)))


def write_episodic(
    store: MemoryStore,
    *,
    episode: int,
    ticker: str,
    sector: str,
    tools_used: frozenset[str] | set[str],
    content: str,
    outcome: float,
    regime: str | None = None,
    quality_threshold: float = WRITE_QUALITY_THRESHOLD,
) -> str | None:
    """Write one episode summary; low-quality outcomes are rejected."""
    store._check_writable()
    quality = episodic_quality(outcome)
    if quality < quality_threshold:
        return None
    store._write_counter += 1
    entry_id = f"epi-{episode:05d}-{store._write_counter:05d}-{ticker}"
    store.add(
        MemoryEntry(
            entry_id=entry_id,
            tier=Tier.EPISODIC,
            ticker=ticker,
            sector=sector,
            tools_used=frozenset(tools_used),
            content=content,
            quality=quality,
            created_at=episode,
            regime=regime,
        )
    )
    return entry_id


def _format_line(entry: MemoryEntry) -> str:
    return (
        f"[{entry.tier.value}|q={entry.quality:.2f}|ep={entry.created_at}"
        f"|{entry.ticker}] {entry.content}"
    )


def format_context(entries: list[MemoryEntry], policy: RetrievalPolicy) -> str:
    if policy.format == "none" or not entries:
        return ""
    if policy.format == "full":
        return "\n".join(_format_line(e) for e in entries)
    if policy.format == "ranked_truncate":
        text = "\n".join(_format_line(e) for e in entries)
        return text[: policy.token_budget]
    # sliding_window: the chronologically first entry anchors the context,
    # followed by the rest in ascending recency.
    anchor = min(entries, key=lambda e: (e.created_at, e.entry_id))
    rest = sorted(
        (e for e in entries if e is not anchor), key=lambda e: (e.created_at, e.entry_id)
    )
    return "\n".join(_format_line(e) for e in [anchor] + rest)


def retrieve(
    store: MemoryStore, policy: RetrievalPolicy, query: MemoryQuery
) -> tuple[list[MemoryEntry], str]:
    """Top-k candidates by descending relevance plus the formatted context."""
    if policy.format == "none":
        return [], ""
    scored: list[tuple[float, MemoryEntry]] = []
    for tier in policy.tiers_enabled:
        for entry in store.entries(tier):
            if entry.quality < policy.quality_threshold:
                continue
            score = relevance_score(query, entry)
            if score > 0.0:
                scored.append((score, entry))
    scored.sort(key=lambda pair: (-pair[0], pair[1].entry_id))
    top = [entry for _, entry in scored[: policy.top_k]]
    return top, format_context(top, policy)


# ------------------------------------------------------------ distillation


@dataclass(frozen=True)
class WindowRecord:
    """One episode's evidence inside a slow window, keyed for distillation."""

    episode: int
    ticker: str
    sector: str
    tool_signals: dict
    realized_return: float
    regime: str | None = None


def _window_patterns(window_records: list[WindowRecord]) -> list[dict]:
    hits: dict[tuple[str, str], list[int]] = {}
    meta: dict[str, WindowRecord] = {}
    for rec in window_records:
        meta[rec.ticker] = rec
        for tool, signal in rec.tool_signals.items():
            if signal == 0.0 or rec.realized_return == 0.0:
                continue
            correct = (signal > 0) == (rec.realized_return > 0)
            c, d = hits.get((tool, rec.ticker), (0, 0))
            hits[(tool, rec.ticker)] = [c + int(correct), d + 1]
    patterns = []
    for (tool, ticker), (correct, decided) in sorted(hits.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        rate = correct / decided
        if rate <= 0.5:
            continue
        regimes = Counter(
            rec.regime for rec in window_records if rec.ticker == ticker and rec.regime
        )
        regime = regimes.most_common(1)[0][0] if regimes else None
        patterns.append(
            {
                "tool": tool,
                "ticker": ticker,
                "sector": meta[ticker].sector,
                "regime": regime,
                "correct": correct,
                "decided": decided,
                "hit_rate": rate,
            }
        )
    return patterns


def template_pattern_text(pattern: dict) -> str:
    regime = pattern["regime"] or "unlabeled"
    return (
        f"{pattern['tool']} called direction correctly "
        f"{pattern['correct']}/{pattern['decided']} on {pattern['ticker']} "
        f"({regime} regime)"
    )


def distill_semantic(
    store: MemoryStore,
    window_records: list[WindowRecord],
    distiller=None,
) -> list[MemoryEntry]:
    """Turn the window's per-tool hit statistics into semantic entries.

    A (tool, ticker) pair distills only when its directional hit rate beats
    0.5; the entry's quality is that hit rate. ``distiller``, when given,
    maps the pattern dicts to content strings (a completion backend hook);
    any distiller failure skips distillation with a warning.
    """
    store._check_writable()
    if not window_records:
        return []
    patterns = _window_patterns(window_records)
    if not patterns:
        return []
    if distiller is None:
        contents = [template_pattern_text(p) for p in patterns]
    else:
        try:
            contents = list(distiller(patterns))
            if len(contents) != len(patterns):
                raise ValueError(
                    f"distiller returned {len(contents)} texts for {len(patterns)} patterns"
                )
        except Exception as exc:  # non-fatal by contract
            logger.warning("distillation skipped: %s", exc)
            return []
    episode = max(rec.episode for rec in window_records)
    created: list[MemoryEntry] = []
    for pattern, content in zip(patterns, contents):
        entry_id = f"sem-{episode:05d}-{pattern['ticker']}-{pattern['tool']}"
        if entry_id in store._ids:
            continue
        entry = MemoryEntry(
            entry_id=entry_id,
            tier=Tier.SEMANTIC,
            ticker=pattern["ticker"],
            sector=pattern["sector"],
            tools_used=frozenset((pattern["tool"],)),
            content=content,
            quality=pattern["hit_rate"],
            created_at=episode,
            regime=pattern["regime"],
        )
        store.add(entry)
        created.append(entry)
    return created


def promote_procedural(
    store: MemoryStore,
    current_episode: int,
    distill_every: int = 10,
    threshold: float = PROMOTION_THRESHOLD,
    persistence_cycles: int = PROMOTION_CYCLES,
) -> list[MemoryEntry]:
    """Copy persistent high-confidence semantic entries into the rule tier."""
    store._check_writable()
    promoted: list[MemoryEntry] = []
    min_age = persistence_cycles * distill_every
    for entry in list(store.entries(Tier.SEMANTIC)):
        if entry.quality < threshold:
            continue
        if current_episode - entry.created_at < min_age:
            continue
        new_id = f"{entry.entry_id}:proc"
        if new_id in store._ids:
            continue
        rule = replace(
            entry, entry_id=new_id, tier=Tier.PROCEDURAL, created_at=current_episode
        )
        store.add(rule)
        promoted.append(rule)
    return promoted

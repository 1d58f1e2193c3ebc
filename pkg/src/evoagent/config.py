"""Run configuration, incremental-build presets, and the ablation grid.

A :class:`RunConfig` fully determines an experiment given a seed: data
source, episode split, timescale schedule, credit method, and the feature
flags the ablation grid toggles. Presets express the incremental build
(stateless -> +tools -> +memory -> full agent) as single-field deltas so
structural comparisons stay honest.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .market import RegimeSegment, SynthConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10
    import tomli as tomllib

CREDIT_METHODS = ("uniform", "fcc", "llm_fcc")
BACKEND_KINDS = ("stub", "http")
PRESET_NAMES = ("stateless", "tools", "memory", "ael")

DEFAULT_SECTORS = {
    "AAPL": "Technology",
    "NVDA": "Technology",
    "JNJ": "Healthcare",
    "UNH": "Healthcare",
    "JPM": "Finance",
    "GS": "Finance",
    "XOM": "Energy",
    "PG": "ConsumerStaples",
    "CAT": "Industrials",
    "NEE": "Utilities",
}
DEFAULT_TICKERS = tuple(DEFAULT_SECTORS)

REGIME_PARAMS = {
    "bull": (0.0012, 0.008),
    "bear": (-0.0012, 0.012),
    "flat": (0.0, 0.006),
}


@dataclass(frozen=True)
class Split:
    """Chronological train/validation/test episode counts."""

    train: int = 140
    val: int = 40
    test: int = 28

    def __post_init__(self) -> None:
        if self.train < 1 or self.val < 1 or self.test < 1:
            raise ConfigError(f"all split phases need >= 1 episode: {self}")

    @property
    def total(self) -> int:
        return self.train + self.val + self.test


@dataclass(frozen=True)
class EvolutionSchedule:
    """When memory-policy evolution may fire."""

    j_min: int = 10
    every: int = 5
    r_min: float = 0.4

    def __post_init__(self) -> None:
        if self.j_min < 0 or self.every < 1 or not (0.0 <= self.r_min <= 1.0):
            raise ConfigError(f"invalid evolution schedule: {self}")


def segment(regime: str, bars: int) -> RegimeSegment:
    """A segment with this package's default drift/vol for the regime."""
    if regime not in REGIME_PARAMS:
        raise ConfigError(f"unknown regime {regime!r}; expected {tuple(REGIME_PARAMS)}")
    drift, vol = REGIME_PARAMS[regime]
    return RegimeSegment(regime, bars, drift, vol)


def default_synth_config(
    tickers: tuple[str, ...] = DEFAULT_TICKERS,
    burn_in: int = 40,
) -> SynthConfig:
    """The default 208-episode benchmark: 7 diverse train weeks, a mixed
    validation stretch, and a bear-to-bull test transition, preceded by a
    flat burn-in margin so every tool has enough history at episode 0."""
    segments = (
        segment("flat", burn_in + 1),
        # train: 140 bars = 3 bull + 2 bear + 2 flat weeks of 20 hourly bars
        segment("bull", 20),
        segment("bear", 20),
        segment("flat", 20),
        segment("bull", 20),
        segment("bear", 20),
        segment("flat", 20),
        segment("bull", 20),
        # validation: 40 bars
        segment("flat", 20),
        segment("bull", 20),
        # test: bear-to-bull transition, 28 bars
        segment("bear", 12),
        segment("bull", 16),
    )
    return SynthConfig(tickers=tickers, segments=segments)


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment run needs besides code."""

    seed: int = 42
    split: Split = field(default_factory=Split)
    burn_in: int = 40
    warm_up: int = 15
    slow_window: int = 10
    fast_window: int = 1
    distill_every: int = 10
    evolution: EvolutionSchedule = field(default_factory=EvolutionSchedule)
    credit_method: str = "uniform"
    blend_lambda: float = 0.5
    memory_enabled: bool = True
    no_warm_up: bool = False
    no_reflection: bool = False
    cold_start: bool = False
    planner_selection: bool = False
    planner_evolution: bool = False
    per_tool_selection: bool = False
    skill_extraction: bool = False
    cost_bp: float = 0.0
    backend: str = "stub"
    temperature: float = 0.5
    risk_budget: float = 0.9
    planner_family: str = "sequential"
    csv_path: str | None = None
    synth: SynthConfig | None = None
    sectors: dict = field(default_factory=lambda: dict(DEFAULT_SECTORS))
    data_dir: str | None = None

    def __post_init__(self) -> None:
        if self.credit_method not in CREDIT_METHODS:
            raise ConfigError(f"credit_method must be one of {CREDIT_METHODS}")
        if self.backend not in BACKEND_KINDS:
            raise ConfigError(f"backend must be one of {BACKEND_KINDS}")
        if self.warm_up < 0 or self.slow_window < 1 or self.fast_window < 1:
            raise ConfigError("warm_up >= 0, slow_window >= 1, fast_window >= 1 required")
        if self.distill_every < 1 or self.burn_in < 30:
            raise ConfigError("distill_every >= 1 and burn_in >= 30 required")
        if self.cost_bp < 0:
            raise ConfigError(f"cost_bp must be >= 0, got {self.cost_bp}")
        if self.no_reflection and self.planner_evolution:
            raise ConfigError("planner evolution needs reflection windows; flags conflict")
        if self.csv_path is not None and self.synth is not None:
            raise ConfigError("csv_path and synth config are mutually exclusive")
        if self.csv_path is None and self.synth is None:
            object.__setattr__(self, "synth", default_synth_config(burn_in=self.burn_in))

    @property
    def effective_warm_up(self) -> int:
        return 0 if self.no_warm_up else self.warm_up

    @property
    def tickers(self) -> tuple[str, ...]:
        if self.synth is not None:
            return self.synth.tickers
        return tuple(sorted(self.sectors))

    def required_bars(self) -> int:
        # one decision window bar per episode plus its outcome bar
        return self.split.total + self.burn_in + 1

    def sector_of(self, ticker: str) -> str:
        return self.sectors.get(ticker, "Unknown")

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["sectors"] = dict(sorted(self.sectors.items()))
        if self.synth is not None:
            doc["synth"]["segments"] = [dataclasses.asdict(s) for s in self.synth.segments]
        return doc


def preset(name: str, base: RunConfig | None = None) -> RunConfig:
    """The incremental-build configurations, derived from a common base.

    stateless: no memory, no reflection; tools: adds only the per-tool
    bandit; memory: memory bandit without reflection; ael: the full default.
    """
    base = base if base is not None else RunConfig()
    if name == "stateless":
        return replace(base, memory_enabled=False, no_reflection=True)
    if name == "tools":
        return replace(base, memory_enabled=False, no_reflection=True, per_tool_selection=True)
    if name == "memory":
        return replace(base, memory_enabled=True, no_reflection=True)
    if name == "ael":
        return replace(base, memory_enabled=True, no_reflection=False)
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")


ABLATION_ORDER = (
    "base",
    "-warm_up",
    "-reflection",
    "+cold_start",
    "+planner_selection",
    "+planner_evolution",
    "+per_tool_selection",
    "+skill_extraction",
    "->fcc",
    "->llm_fcc",
)

_ABLATION_DELTAS = {
    "-warm_up": {"no_warm_up": True},
    "-reflection": {"no_reflection": True},
    "+cold_start": {"cold_start": True},
    "+planner_selection": {"planner_selection": True},
    "+planner_evolution": {"planner_evolution": True},
    "+per_tool_selection": {"per_tool_selection": True},
    "+skill_extraction": {"skill_extraction": True},
    "->fcc": {"credit_method": "fcc"},
    "->llm_fcc": {"credit_method": "llm_fcc"},
}


def config_diff(a: RunConfig, b: RunConfig) -> list[str]:
    """Names of top-level fields on which two configs differ."""
    da, db = a.to_dict(), b.to_dict()
    return sorted(name for name in da if da[name] != db[name])


@dataclass(frozen=True)
class AblationSpec:
    """The base row plus nine single-field variants."""

    rows: tuple  # of (name, RunConfig)

    def __post_init__(self) -> None:
        names = [name for name, _ in self.rows]
        if names != list(ABLATION_ORDER):
            raise ConfigError(f"ablation rows must be exactly {ABLATION_ORDER}")
        base = self.rows[0][1]
        for name, config in self.rows[1:]:
            difference = config_diff(base, config)
            if len(difference) != 1:
                raise ConfigError(
                    f"ablation row {name!r} differs from base in {difference}, expected one field"
                )

    def __iter__(self):
        return iter(self.rows)


def ablation_spec(base: RunConfig | None = None) -> AblationSpec:
    """Build the grid from a main-configuration base."""
    base = base if base is not None else RunConfig()
    extras = (
        base.credit_method != "uniform",
        base.cold_start,
        base.planner_selection,
        base.planner_evolution,
        base.per_tool_selection,
        base.skill_extraction,
        base.no_warm_up,
        base.no_reflection,
        not base.memory_enabled,
    )
    if any(extras):
        raise ConfigError("ablation base must be the main configuration (no extras)")
    rows = [("base", base)]
    for name in ABLATION_ORDER[1:]:
        rows.append((name, replace(base, **_ABLATION_DELTAS[name])))
    return AblationSpec(tuple(rows))


# ---------------------------------------------------------------- loading


def _synth_from_doc(doc: dict) -> SynthConfig:
    def _segment(s: dict) -> RegimeSegment:
        # drift/vol default to the regime's parameters, as in segment()
        if "drift" in s or "vol" in s:
            return RegimeSegment(
                s["regime"], int(s["bars"]), float(s["drift"]), float(s["vol"])
            )
        return segment(s["regime"], int(s["bars"]))

    try:
        segments = tuple(_segment(s) for s in doc["segments"])
        return SynthConfig(
            tickers=tuple(doc["tickers"]),
            segments=segments,
            start_price=float(doc.get("start_price", 100.0)),
            start_date=str(doc.get("start_date", "2024-01-02")),
            ticker_drift={k: float(v) for k, v in doc.get("ticker_drift", {}).items()},
            ticker_vol_scale={k: float(v) for k, v in doc.get("ticker_vol_scale", {}).items()},
        )
    except KeyError as exc:
        raise ConfigError(f"synth config missing key: {exc}") from exc


def config_from_doc(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed TOML document."""
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = dict(doc)
    if "split" in kwargs:
        kwargs["split"] = Split(**kwargs["split"])
    if "evolution" in kwargs:
        kwargs["evolution"] = EvolutionSchedule(**kwargs["evolution"])
    if "synth" in kwargs:
        kwargs["synth"] = _synth_from_doc(kwargs["synth"])
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    """Load a RunConfig from a TOML file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    return config_from_doc(doc)

"""Two-timescale evolving agent for sequential portfolio allocation.

Fast timescale: Thompson Sampling over memory retrieval policies (plus
optional LinUCB planner selection and per-tool bandits). Slow timescale:
window reflection, memory distillation/promotion, and retrieval-policy
evolution. Everything runs against a pluggable completion backend with a
deterministic rule-based stub, so full runs are reproducible offline.
"""

__version__ = "0.1.0"

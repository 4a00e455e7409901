"""rfgen: a REINFORCE-family policy-gradient engine for molecular string
generation, with deterministic toy reward tasks and benchmark metrics."""

__version__ = "0.1.0"

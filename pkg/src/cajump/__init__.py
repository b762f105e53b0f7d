"""Two-phase cellular automaton simulator and a small CNN for recovering its jump parameter."""

__version__ = "0.1.0"

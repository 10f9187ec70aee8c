"""Step-level Q-value models for guiding agent action selection."""

__version__ = "0.1.0"

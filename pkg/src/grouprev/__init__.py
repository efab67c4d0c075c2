"""Group-revision policy optimization on a synthetic grounding environment."""

__version__ = "0.1.0"

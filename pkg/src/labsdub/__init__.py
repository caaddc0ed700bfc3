"""Length-aware beam search and duration-matched selection for dubbing-oriented translation."""

__version__ = "0.1.0"

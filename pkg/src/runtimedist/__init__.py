"""Running-time distribution prediction for relational query plans."""

__version__ = "0.1.0"

"""Multi-task speech emotion recognition on layered encoder features, numpy only."""
__version__ = "0.1.0"

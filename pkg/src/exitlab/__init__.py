"""Early-exit mistake detection on streaming keystep clips."""

__version__ = "0.1.0"

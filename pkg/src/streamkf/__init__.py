"""Online learnable keyframe extraction, key-shot summaries and keyframe classification."""

__version__ = "0.1.0"

"""Domain-feature reward models for RLHF from small preference datasets."""

__version__ = "0.1.0"

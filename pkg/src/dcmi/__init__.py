"""Domain-aware contrastive knowledge transfer for multi-domain imbalanced learning."""

__version__ = "0.1.0"

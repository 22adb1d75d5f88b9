"""Siamese change detection with a hard-sample-aware contrastive loss, in numpy."""

__version__ = "0.1.0"

"""Self-supervised dual-task vision models (contrastive + relative position) and their evaluation."""

__version__ = "0.1.0"

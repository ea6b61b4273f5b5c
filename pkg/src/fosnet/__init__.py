"""Miniature FOSNet scene recognition: scene coherence loss, partial convolution,
GAP-FC head conversion and object/scene fusion on a numpy autodiff core."""

__version__ = "0.1.0"

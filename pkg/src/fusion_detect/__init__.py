"""Dual-backbone fused Faster R-CNN detector built on plain numpy."""

__version__ = "0.1.0"

"""Desk-scale segmentation model built around mutual-inclusion attention,
with metrics, a deterministic trainer and an ablation harness."""

__version__ = "0.1.0"

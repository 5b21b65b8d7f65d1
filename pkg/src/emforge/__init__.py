"""Desk-scale instruction-conditioned multimodal embedding training."""

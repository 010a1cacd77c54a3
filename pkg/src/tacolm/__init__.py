"""Desk-scale gated-attention codec language model with a toy RVQ codec."""

__version__ = "0.1.0"

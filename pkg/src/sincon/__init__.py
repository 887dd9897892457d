"""Rumor detection on propagation trees, message-injection attacks, and a contrastive defense."""

__version__ = "0.1.0"

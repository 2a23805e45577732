"""Smartphone gaze estimation: dataset tooling, a two-tower CNN and per-user personalization."""

__version__ = "0.1.0"

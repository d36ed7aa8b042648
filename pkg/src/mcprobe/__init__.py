"""Counterfactual language-identity interventions on masked language models."""

__version__ = "0.1.0"

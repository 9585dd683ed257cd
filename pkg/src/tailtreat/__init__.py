"""Complier tail treatment effects (CTATE) and quantile treatment effects
under two-sided noncompliance, by weighted FZ-loss minimization."""

__version__ = "0.1.0"

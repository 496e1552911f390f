"""Adverse Control Toolkit: minimax optimal control with relaxed and hyperrelaxed controls."""

__version__ = "0.1.0"

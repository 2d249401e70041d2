"""Pessimistic Q-ensembles for offline RL: closed-form LCB analysis, toy FQE studies and MSG."""

__version__ = "0.1.0"

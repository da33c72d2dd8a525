"""Desk-scale federated prototype-augmented prompt learning simulator."""

__version__ = "0.1.0"

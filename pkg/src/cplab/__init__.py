"""Desk-scale lab for attacks on, and defences of, collaborative perception."""

__version__ = "0.1.0"

"""Desk-scale LHUC speaker adaptation toolkit for a toy Conformer recognizer."""

__version__ = "0.1.0"

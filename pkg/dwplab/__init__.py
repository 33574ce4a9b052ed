"""Desk-scale laboratory for targeted transfer attacks with diversified weight pruning."""

__version__ = '0.1.0'

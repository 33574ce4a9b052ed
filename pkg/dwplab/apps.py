"""
Django app configuration for the DWP laboratory.
"""

from django.apps import AppConfig


class DwplabConfig(AppConfig):
    """Configuration for the dwplab app."""
    name = 'dwplab'
    verbose_name = 'DWP transfer-attack lab'

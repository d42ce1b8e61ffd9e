"""Automated Lugano staging from PET/CT volumes and anatomical landmarks."""

__version__ = "0.1.0"

"""Imputation methods. Each `*_imputer.py` module provides one ImputerBase subclass."""

from .base import ImputationRequest, ImputationResult, ImputerBase

__all__ = ["ImputationRequest", "ImputationResult", "ImputerBase"]

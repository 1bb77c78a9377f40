"""Shapley and delta-Shapley data valuation by layer-stratified sampling."""

__version__ = "0.1.0"

"""Unsupervised time-series anomaly detection."""

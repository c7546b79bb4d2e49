"""Desk-scale ablation bench for LSTM-FCN style time series classifiers."""

__version__ = "0.1.0"

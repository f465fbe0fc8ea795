"""Feedback ConvLSTM networks with per-iteration predictions, on numpy."""

__version__ = "0.1.0"

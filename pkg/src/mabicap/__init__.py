"""Mutual-aid bidirectional attentive LSTM captioning with a cross-modal retoucher."""

__version__ = "0.1.0"

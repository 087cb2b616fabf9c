"""Per-lead CNN/LSTM classifier separating ventricular tachycardia from SVT with aberrancy."""

__version__ = "0.1.0"

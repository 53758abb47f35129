"""Neuron-sensitivity analysis, attacks, and regularised training for dense classifiers."""

__version__ = "0.1.0"

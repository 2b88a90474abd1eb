"""Neuron-importance masking as a test-time adversarial defense, with an adaptive evaluation suite."""

__version__ = "0.1.0"

"""Binarized feedforward sequential memory networks with thinnable depth."""
__version__ = "0.1.0"

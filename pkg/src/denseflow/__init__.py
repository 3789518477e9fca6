"""Unsupervised optical flow with a fully-convolutional DenseNet."""

__version__ = "0.1.0"

"""Magnitude pruning of a two-branch nucleus segmentation network, with
watershed-based instance merging and AJI/PQ evaluation."""

__version__ = "0.1.0"

"""Topology optimization of nonlinear forced response curves with cubic SSM reduction."""

__version__ = "0.1.0"

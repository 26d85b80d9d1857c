"""Metric ensembles learned with structured large-margin solvers."""

"""Brackets, splitting integrators, and Reeb-graph quasi-states on surfaces."""

__version__ = "0.1.0"

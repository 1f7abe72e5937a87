"""Deterministic coordination-protocol engine.

Evaluates a fixed proposal set under four aggregation regimes (unanimous
veto, scalar mean, and two versions of a non-scalar pipeline), performs one
governed protocol revision, and records everything in a hash-chained log.
"""

__version__ = "0.1.0"

"""Weak measurement of velocity for a particle in one dimension.

Simulates the weak-then-strong position measurement protocol under the Bohmian
velocity law and under variants that add a divergence-free current, and checks
that the protocol's estimate is the Bohmian velocity in both cases.
"""
__version__ = "0.1.0"

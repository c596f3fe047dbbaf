"""Cascade-ranking simulator and consistency toolkit.

Simulates a two-stage (pre-ranking -> ranking) ad pipeline over a synthetic
world, trains pre-ranking models under several objectives, and measures how
consistently the pre-ranking stage reproduces the ranking stage's decisions.
"""

__version__ = "0.1.0"

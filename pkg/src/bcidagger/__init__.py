"""Simulated closed-loop training of BCI velocity decoders by dataset
aggregation, with online update rules, intention oracles for a cursor and a
kinematic arm, and a reproducible experiment harness."""
from __future__ import annotations

__version__ = "0.1.0"

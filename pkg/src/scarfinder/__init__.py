"""Evolve-project-correct search for low-entanglement periodic trajectories in spin chains."""
from __future__ import annotations

__version__ = "0.1.0"

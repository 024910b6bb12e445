"""Bundled L-shaped demo: one obstacle, two-zone field, pre-fitted kernel."""

from pathlib import Path

DIR = Path(__file__).resolve().parent
ENV = DIR / "env.json"
KERNEL = DIR / "kernel.json"
PILOT = DIR / "pilot.csv"
CONFIG = DIR / "config.json"

BOUNDARY = [[0.0, 0.0], [100.0, 0.0], [100.0, 35.0], [70.0, 35.0], [70.0, 60.0], [0.0, 60.0]]
OBSTACLE = [[30.0, 22.0], [40.0, 22.0], [40.0, 32.0], [30.0, 32.0]]
SPACING = 2.5
SPLIT_X = 50.0

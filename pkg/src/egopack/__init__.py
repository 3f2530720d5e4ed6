"""Temporal-graph multi-task learning with frozen per-task prototype banks."""

__version__ = "0.1.0"

from .data import TASKS  # noqa: E402

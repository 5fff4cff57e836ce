"""Cooperative-progress point-to-point messaging with a mini cluster harness."""

from . import errors
from .loop import Event, Future, MonotonicClock, Task, TaskLoop, VirtualClock, gather, sleep, wait_for

__all__ = [
    "Event",
    "Future",
    "MonotonicClock",
    "Task",
    "TaskLoop",
    "VirtualClock",
    "errors",
    "gather",
    "sleep",
    "wait_for",
]

__version__ = "0.1.0"

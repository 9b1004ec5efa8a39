"""Navigation-agent evaluation harness built around subtask lists."""

__version__ = "0.1.0"

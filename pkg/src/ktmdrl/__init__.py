"""Multi-task continuous control by knowledge transfer from task-specific TD3 teachers."""

__version__ = "0.1.0"

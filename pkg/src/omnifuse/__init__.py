"""Multi-source embedding fusion, teacher-student distillation and transfer."""

__version__ = "0.1.0"

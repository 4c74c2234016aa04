"""Multi-shot teacher-student re-identification with uncertainty-weighted distillation."""

__version__ = "0.1.0"

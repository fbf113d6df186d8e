"""Few-shot text classification with MAML and ATAML on a small numpy autodiff engine."""

__version__ = "0.1.0"

"""Visual sound source localization: localizers, baselines and cIoU/AUC evaluation."""

__version__ = "0.1.0"

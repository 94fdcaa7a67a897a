"""Cross-organ domain-adaptive tumour segmentation (universal + auxiliary networks)."""

__version__ = "0.1.0"

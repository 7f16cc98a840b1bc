"""Domain-aware fine-tuning lab: BN conversion, LP / FT / LP-FT / DAFT and
feature-distortion diagnostics on desk-scale networks."""

__version__ = "0.1.0"

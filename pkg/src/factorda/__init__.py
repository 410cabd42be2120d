"""Multi-source adversarial domain adaptation with factor-preserving gradient masks."""

__version__ = "0.1.0"

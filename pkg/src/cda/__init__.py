"""Cross-site volumetric classification: synthetic two-domain benchmark,
dual-branch three-stage adaptation training, and a cross-validated
evaluation harness."""

__version__ = "0.1.0"

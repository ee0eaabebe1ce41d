"""Benchmark toolkit for follow-up MRI classification of glioblastoma response.

Subpackages cover cohort discovery, quality control, preprocessing, label
consolidation, training-split balancing, a catalog of eleven classifier
families, the cross-validation harness and reporting.
"""

__version__ = "0.1.0"

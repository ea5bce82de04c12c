"""Joint classification and ranking of ICD-9 codes for clinical notes."""

__version__ = "0.1.0"

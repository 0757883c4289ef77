"""Knowledge-graph guided synthetic QA data generation."""

__version__ = "0.1.0"

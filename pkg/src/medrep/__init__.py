"""medrep: knowledge-graph concept embeddings and visit-sequence models for EHR data."""

__version__ = "0.1.0"

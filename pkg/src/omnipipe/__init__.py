"""Deterministic multimodal input-pipeline toolkit.

Media planners with exact token budgets, projector blocks with verified
gradients, sample packing with attention isolation, a streaming injection
scheduler, dataset curation filters, and evaluation metrics, all built on a
small float64 numeric kernel.
"""

__version__ = "0.1.0"

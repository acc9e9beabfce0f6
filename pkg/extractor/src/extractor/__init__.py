"""Guidance-embedding extraction from pretrained multimodal models."""

from .extract import BackendResult, DEFAULT_PROMPT, ExtractorConfig, extract, pool_embeddings
from .store_format import StoreWriter

__all__ = ["BackendResult", "DEFAULT_PROMPT", "ExtractorConfig", "extract",
           "pool_embeddings", "StoreWriter"]

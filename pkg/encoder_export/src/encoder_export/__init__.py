"""Offline export bridge: CLIP ViT-B/32 weights and corpus embeddings in the
core toolkit's container and store formats."""

from .corpus import export_corpus_embeddings
from .exporter import export_encoder

__version__ = "0.1.0"

"""Exporter: GPT-2-family checkpoints and text corpora to `.bsc`/`.tok`."""

from .export import ExportError, ExportSpec, export_checkpoint, tokenize_corpus

__version__ = "0.1.0"

__all__ = ["ExportError", "ExportSpec", "export_checkpoint", "tokenize_corpus"]

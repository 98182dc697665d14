"""Siamese template matching for zero-shot glyph recognition, in numpy."""

from .dataio import GrayImage, TemplateMatrix, load_pgm, save_pgm
from .matcher import build_template_matrix, classify, classify_direct, classify_restricted
from .pairs import generate_pairs, pair_counts
from .prep import aspect_map, invert, preprocess
from .siamese import ArchitectureSpec, SimilarityHead, build_model, embed, similarity

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "GrayImage",
    "SimilarityHead",
    "TemplateMatrix",
    "aspect_map",
    "build_model",
    "build_template_matrix",
    "classify",
    "classify_direct",
    "classify_restricted",
    "embed",
    "generate_pairs",
    "invert",
    "load_pgm",
    "pair_counts",
    "preprocess",
    "save_pgm",
    "similarity",
]

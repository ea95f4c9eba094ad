"""Chord-conditioned recomposition of four-voice measures.

Measures become binary piano rolls, a VQ-VAE compresses each to a grid of
discrete codes, and a gated masked-convolution prior regenerates code grids
conditioned on (previous, current, next) chord functions.
"""

from .harmony import ChordLabel, ChordVocab, label_measure, make_triplets
from .prior import CondSpec, PriorConfig, PriorModel, generate_sequence, sample_codes
from .score import ToneVocab, estimate_key, normalize_key, parse_kern_subset, score_to_rolls
from .tensor import Tape, Tensor
from .vqvae import VqVae, VqVaeConfig, quantize

__version__ = "0.1.0"

__all__ = [
    "ChordLabel", "ChordVocab", "CondSpec", "PriorConfig", "PriorModel", "Tape", "Tensor",
    "ToneVocab", "VqVae", "VqVaeConfig", "estimate_key", "generate_sequence", "label_measure",
    "make_triplets", "normalize_key", "parse_kern_subset", "quantize", "sample_codes",
    "score_to_rolls",
]

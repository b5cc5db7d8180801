"""Sentence-level song editing with a delayed-pattern token language model.

The package covers the full desk-scale pipeline over a synthetic two-track
song domain: corpus synthesis, residual vector quantization into K parallel
token streams, edit rearrangement with a delayed interleaving pattern, an
edit-masked transformer LM with optional multi-source conditioning, sampling
with classifier-free guidance and score-based candidate selection, story-style
long-form generation, and evaluation analogs (syllable error rate, Frechet
token-feature distance, boundary smoothness).
"""

__version__ = "0.1.0"

"""Byte-level cross-tokenizer distillation toolkit.

Converts token-level language-model probabilities to byte-level ones
(exactly, or via a pruned tokenization lattice), trains a tiny student
model with a detachable byte-level head, and ships the offline
precompute / sweep / report pipeline around them.
"""

__version__ = "0.1.0"

"""Zero-shot text-to-image retrieval over precomputed embeddings.

A conditional Wasserstein GAN generates per-class representative image
embeddings from encoded text; a single-layer mapper projects image
embeddings into a common space where cosine similarity ranks candidates.
Training alternates GAN updates and mapper updates on an
expectation-maximization schedule.
"""

__version__ = "0.1.0"

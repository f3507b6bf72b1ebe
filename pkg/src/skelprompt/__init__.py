"""Zero-shot skeleton anomaly action recognition with a frozen set encoder.

Pipeline: skeleton clips are flattened into unordered joint-token clouds, a
pretrained permutation-invariant extractor maps each cloud to a feature
vector, a Gaussian fitted on normal features gives an out-of-distribution
score, and cosine similarity to text prompt embeddings gives a prompt score.
"""

__version__ = "0.1.0"

"""Interpretable classification on top of frozen patch embeddings.

The package trains a small per-patch MLP adapter over precomputed
vision-backbone embeddings, average-pools the resulting feature maps into
a feature vector, classifies through a decision layer that is either dense
(real-valued) or sparse-binary (a selected feature subset with 0/1 class
assignments), and scores the result with a suite of interpretability
metrics.
"""

__version__ = "0.1.0"

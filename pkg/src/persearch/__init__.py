"""Person search with a query-based re-ID transformer.

A desk-scale, self-contained stack: double-precision tensors with
reverse-mode autodiff, multi-head and deformable attention, a multi-scale
re-ID transformer with online instance matching losses, a jittered
detector stub, the standard person-search retrieval protocol with optional
context-graph re-ranking, and a synthetic benchmark to train and score on.
"""

__version__ = "0.1.0"

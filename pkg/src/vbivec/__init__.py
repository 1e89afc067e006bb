"""vbivec: i-vector extraction and extractor training with mean-field variational Bayes."""

__version__ = "1.0.0"

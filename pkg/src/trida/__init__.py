"""Three-domain adaptation toolkit.

Treats unsupervised domain adaptation as a problem over three domains
(source, target, pre-training data): a shared feature extractor carries a
target classifier plus a removable pre-training classifier, pre-training
batches keep their cross-entropy supervision during adaptation, and an
intermediate domain of pixel-level convex mixes between pre-training and
target images is constrained by a dual-head semantic loss and a feature
interpolation penalty.  Includes taxonomy-based pre-training class
selection, model-inversion synthesis of proxy pre-training images,
distribution-shift diagnostics, and a reproducible toy benchmark.
"""

from trida.errors import TridaError, ValidationError, LookupFailure

__version__ = "0.1.0"

__all__ = ["TridaError", "ValidationError", "LookupFailure", "__version__"]

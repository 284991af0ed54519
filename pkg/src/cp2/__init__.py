"""Copy-paste contrastive pretraining for dense prediction, at desk scale."""

__version__ = "0.1.0"

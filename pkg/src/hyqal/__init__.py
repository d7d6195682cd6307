"""Self-supervised contrastive pretraining with a simulated quantum feature layer."""

__version__ = "0.1.0"

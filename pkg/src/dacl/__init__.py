"""Domain-agnostic contrastive pretraining for synthetic-to-real adaptation."""

__version__ = "0.1.0"

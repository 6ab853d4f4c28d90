"""MAE pre-training and ViT fine-tuning for grapevine variety classification, at desk scale."""

__version__ = "0.1.0"

"""PCOS ultrasound screening: data ingestion, MixUp/CutMix, transfer-learning
classifiers, evaluation and visual explanations."""

__version__ = "0.1.0"

"""Chest X-ray screening pipeline: manifest construction, minority-class
augmentation, frozen-backbone feature extraction, linear-head training, and
threshold/ROC evaluation, orchestrated by one CLI."""

__version__ = "0.1.0"

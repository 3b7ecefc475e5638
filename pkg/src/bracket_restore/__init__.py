"""Restoration of multi-exposure RAW brackets: Bayer-preserving augmentation, flow-guided
deformable alignment with spatial attention, recurrent aggregation, and the training,
evaluation and synthetic-data tooling around them."""

__version__ = "0.1.0"

"""trackseg: a desk-scale Siamese tracker/segmenter built on a tiny numpy
autodiff core.  Trains a multi-task exemplar/search network on synthetic
video, tracks online emitting binary masks and rotated boxes, and scores the
results with tracking and segmentation metrics."""

__version__ = "0.1.0"

"""Scribble-supervised multimodal salient object detection.

A frozen ViT encoder shared across modalities, per-modality low-rank
modulators on the attention projections of its last blocks, and a siamese
prompt/no-prompt mask decoder trained from sparse scribble labels.
"""

__version__ = "0.1.0"

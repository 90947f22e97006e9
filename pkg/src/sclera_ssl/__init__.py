"""Semi-supervised sclera segmentation with augmentation-averaged and
transform-equivariant label guessing over an improved U2Net."""

__version__ = "0.1.0"

"""Point-prompted segmentation via iterative box-prompt refinement.

A single labeled point is grown into multi-scale box proposals; a small
trained refiner picks the proposal that best matches a class prototype, a
box-prompt segmenter turns the box into a mask, and the mask's tight box
seeds the next round.
"""

from .geometry import BBox, Image2D, Mask2D, PointPrompt

__all__ = ["BBox", "Image2D", "Mask2D", "PointPrompt"]

__version__ = "0.1.0"

"""Source-free test-time adaptation for volumetric segmentation.

A self-contained CPU engine: float64 autodiff tensor core, a miniature
3D U-Net with style modulation and three structural loss heads, a learnable
composite augmentation policy, an EMA teacher / adaptive student loop, and
the evaluation metrics (Dice, HD95, IoU, sensitivity) to measure it.
"""

__version__ = "0.1.0"

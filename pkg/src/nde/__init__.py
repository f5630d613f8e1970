"""Nighttime dehaze-enhancement toolkit.

Synthesizes a nighttime-hazed benchmark from clear outdoor imagery, trains a
three-stage restoration network (Retinex decomposition, illumination
enhancement, reflectance dehazing) and evaluates results with from-scratch
SSIM/PSNR plus cascade baselines.
"""

__version__ = "0.1.0"

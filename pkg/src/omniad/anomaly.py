"""Anomaly maps from multi-scale cosine dissimilarity of feature pyramids."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionError
from .ops import resize_array


@dataclass
class AnomalyMap:
    """Per-pixel anomaly scores at input resolution plus the image score."""

    map: np.ndarray
    image_score: float


def cosine_distance_map(original, reconstructed):
    """Per-pixel ``1 - cos`` over channel vectors; zero vectors score 1.

    Values lie in [0, 2]: 0 for identical directions, 2 for opposite ones.
    """
    if original.shape != reconstructed.shape:
        raise DimensionError(
            f"feature shapes differ: {original.shape} vs {reconstructed.shape}")
    dot = (original * reconstructed).sum(axis=-1)
    norms = np.linalg.norm(original, axis=-1) * np.linalg.norm(reconstructed, axis=-1)
    cos = np.divide(dot, norms, out=np.zeros_like(dot), where=norms > 0.0)
    return 1.0 - cos


def anomaly_map(pyramid, recons, out_size, sigma=4.0):
    """Combine per-scale cosine-distance maps into one input-resolution map.

    Each scale's map is bilinearly resized to ``out_size`` and the scales are
    summed; the sum is Gaussian-smoothed with std ``sigma`` (truncated at
    four sigmas; 0 disables).  The image-level score is the smoothed map's
    maximum.
    """
    h, w = int(out_size[0]), int(out_size[1])
    combined = np.zeros((h, w))
    for orig, recon in zip(pyramid.levels(), recons):
        recon_arr = recon if isinstance(recon, np.ndarray) else recon.data
        scale_map = cosine_distance_map(orig, recon_arr)
        combined += resize_array(scale_map, (h, w))
    if sigma > 0.0:
        combined = gaussian_filter(combined, sigma=sigma, truncate=4.0, mode="reflect")
    return AnomalyMap(map=combined, image_score=float(combined.max()))

"""Fixture builders shared by the test modules."""

import numpy as np


def smooth_texture(rng, h, w, sigma=3.0):
    """Band-limited random texture with unit variance."""
    from scipy import ndimage

    t = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    return (t - t.mean()) / t.std()


def translate(a, dx, dy):
    """Periodic translation: out(x, y) = a(x - dx, y - dy)."""
    return np.roll(a, (dy, dx), axis=(-2, -1))

"""Small procedurally generated corpora for desk-scale runs.

Content images are smooth random scenes with hues clustered around green.
A synthetic "artist" is a fixed hue rotation applied to such scenes, which
makes artists linearly separable by colour statistics.
"""

import math

import numpy as np
import torch
import torch.nn.functional as F

CONTENT_HUE = 1.0 / 3.0
DEFAULT_ARTISTS = {"artist_a": 120.0, "artist_b": -120.0}


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> torch.Tensor:
    coarse = torch.from_numpy(rng.random((1, 1, cells, cells))).float()
    return F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=False)[0, 0].clamp(0, 1)


def hsv_to_rgb(h: torch.Tensor, s: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Vectorised HSV -> RGB; inputs in [0, 1], output ``[3, ...]``."""
    h6 = (h % 1.0) * 6.0
    i = torch.floor(h6)
    f = h6 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.long() % 6
    r = torch.stack([v, q, p, p, t, v])
    g = torch.stack([t, v, v, q, p, p])
    b = torch.stack([p, p, t, v, v, q])
    sel = i.unsqueeze(0)
    return torch.cat([c.gather(0, sel) for c in (r, g, b)])


def random_scene(rng: np.random.Generator, size: int = 64, base_hue: float = CONTENT_HUE,
                 hue_spread: float = 0.06) -> torch.Tensor:
    """A ``[3, size, size]`` image in [0, 1] with structure at several scales."""
    hue = base_hue + hue_spread * (2 * _smooth_field(rng, size, 4) - 1)
    sat = 0.4 + 0.5 * _smooth_field(rng, size, 6)
    val = 0.25 + 0.7 * (0.6 * _smooth_field(rng, size, 5) + 0.4 * _smooth_field(rng, size, 12))
    return hsv_to_rgb(hue, sat, val).clamp(0, 1)


def hue_rotation_matrix(degrees: float) -> torch.Tensor:
    """Rotation of RGB space about the grey axis."""
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return torch.tensor([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


def hue_shift(images: torch.Tensor, degrees: float) -> torch.Tensor:
    """Rotate hue of ``[3, H, W]`` or ``[N, 3, H, W]`` images; result clipped to [0, 1]."""
    m = hue_rotation_matrix(degrees).to(images.dtype)
    return torch.einsum("ij,...jhw->...ihw", m, images).clamp(0, 1)


def make_content_images(n: int, size: int = 64, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [random_scene(rng, size) for _ in range(n)]


def make_artist_corpus(n_per_artist: int, size: int = 64, seed: int = 0, artists=None):
    """``{artist: [image, ...]}`` where each artist hue-rotates fresh scenes."""
    artists = artists or DEFAULT_ARTISTS
    rng = np.random.default_rng(seed)
    return {
        name: [hue_shift(random_scene(rng, size), deg) for _ in range(n_per_artist)]
        for name, deg in artists.items()
    }


def hue_stylizer(degrees: float):
    """A stylizer that applies exactly one synthetic artist's transform."""
    def apply(batch: torch.Tensor) -> torch.Tensor:
        return hue_shift(batch, degrees)
    return apply

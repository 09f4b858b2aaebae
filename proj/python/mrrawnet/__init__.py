"""Multi-resolution raw-waveform speaker verification (desk-scale).

Thin Python surface over the C++ core: front-end geometry, embedding
extraction, verification metrics, and the built-in self-check suites.
"""

from ._core import (
    Embedder,
    cosine_lr,
    cosine_score,
    default_config,
    eer,
    embedder_from_config,
    frame_stride,
    geometry,
    min_dcf,
    param_counts,
    preemphasize,
    verify,
)

__all__ = [
    "Embedder",
    "cosine_lr",
    "cosine_score",
    "default_config",
    "eer",
    "embedder_from_config",
    "frame_stride",
    "geometry",
    "min_dcf",
    "param_counts",
    "preemphasize",
    "verify",
]

__version__ = "0.1.0"

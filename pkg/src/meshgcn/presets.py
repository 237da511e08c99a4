"""Named configurations: the full-scale setup and the desk-scale toy setup."""

from __future__ import annotations

from .model import FULL_BLOCK_CHANNELS, DecoderConfig
from .sampling import DEFAULT_BOUNDARY_WEIGHT, MeshHierarchy, build_hierarchy
from .shapes import icosphere

# Vertex and face counts of the six face-mesh resolutions, finest first.
FULL_LEVEL_VERTICES = (53215, 13304, 3326, 832, 208, 52)
FULL_LEVEL_FACES = (105954, 26356, 6528, 1599, 382, 84)

FULL = {
    "latent_dim": 256,
    "cheb_order": 3,
    "block_channels": FULL_BLOCK_CHANNELS,
    "head_channels": (16, 3),
    "epochs": 80,
    "batch_size": 50,
    "lr": 1e-3,
    "decay_every": 20,
    "alpha": 0.1,
}

TOY = {
    "latent_dim": 8,
    "samples": 500,
    "cheb_order": 3,
    "block_channels": (32, 16, 16),
    "head_channels": (16, 3),
    "leaky_slope": 0.2,
    "epochs": 200,
    "batch_size": 50,
    "lr": 1e-2,
    "decay_every": 40,
    "alpha": 0.1,
}

TOY_TARGETS = (162, 42)
# 6 levels from a 2562-vertex sphere, used to exercise the full-scale channel plan
SIX_LEVEL_TARGETS = (1000, 400, 160, 64, 26)


def toy_hierarchy(lambda_strategy: str = "power") -> MeshHierarchy:
    """642 -> 162 -> 42 vertex sphere hierarchy."""
    return build_hierarchy(icosphere(3), TOY_TARGETS, DEFAULT_BOUNDARY_WEIGHT, lambda_strategy)


def six_level_hierarchy(lambda_strategy: str = "power") -> MeshHierarchy:
    """Six-level hierarchy on a 2562-vertex sphere."""
    return build_hierarchy(icosphere(4), SIX_LEVEL_TARGETS, DEFAULT_BOUNDARY_WEIGHT,
                           lambda_strategy)


def toy_decoder_config(**overrides) -> DecoderConfig:
    kw = {k: TOY[k] for k in ("latent_dim", "cheb_order", "block_channels", "head_channels",
                              "leaky_slope")}
    kw.update(overrides)
    return DecoderConfig(**kw)


def full_decoder_config(**overrides) -> DecoderConfig:
    kw = {k: FULL[k] for k in ("latent_dim", "cheb_order", "block_channels", "head_channels")}
    kw.update(overrides)
    return DecoderConfig(**kw)

"""The coarse-to-fine mesh decoder and its checkpoint format.

Layout, for a hierarchy with levels ``0`` (finest) .. ``J`` (coarsest)::

    z -> dense -> (N_J, C_0)
      -> block_0 @ level J -> up -> block_1 @ level J-1 -> up -> ...
      -> block_J @ level 0
      -> head conv (IN + leaky) -> head conv (linear) -> (N_0, 3)
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .gcn import (
    DEFAULT_EPS,
    DEFAULT_SLOPE,
    ChebConvParams,
    InstanceNormParams,
    ResGCNBlockParams,
    cheb_conv_backward,
    cheb_conv_forward,
    chebyshev_basis,
    dense_backward,
    dense_forward,
    instance_norm_backward,
    instance_norm_forward,
    leaky_relu,
    leaky_relu_backward,
    resgcn_block_backward,
    resgcn_block_forward,
    upsample_backward,
    upsample_forward,
)
from .sampling import MeshHierarchy

FULL_BLOCK_CHANNELS = (128, 64, 32, 32, 16, 16)


@dataclass(frozen=True)
class DecoderConfig:
    latent_dim: int = 256
    cheb_order: int = 3
    block_channels: tuple[int, ...] = FULL_BLOCK_CHANNELS
    head_channels: tuple[int, int] = (16, 3)
    leaky_slope: float = DEFAULT_SLOPE
    lambda_strategy: str = "power"
    seed: int = 0
    use_bias: bool = True
    norm: str = "instance"  # "batch" only for the convergence diagnostic
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "head_channels", tuple(int(c) for c in self.head_channels))
        if self.cheb_order < 1:
            raise ValueError("cheb_order must be >= 1")
        if self.latent_dim < 1 or not self.block_channels:
            raise ValueError("latent_dim and block_channels must be non-empty")
        if len(self.head_channels) != 2 or self.head_channels[-1] != 3:
            raise ValueError("head_channels must be two widths ending in 3")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if self.norm not in ("instance", "batch"):
            raise ValueError("norm must be 'instance' or 'batch'")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DecoderConfig":
        return cls(**json.loads(text))


@dataclass
class DecoderParams:
    config: DecoderConfig
    dense_weight: np.ndarray
    dense_bias: np.ndarray
    blocks: list[ResGCNBlockParams]
    head1: ChebConvParams
    head_norm: InstanceNormParams
    head2: ChebConvParams

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every learnable array by a stable dotted name, in a fixed order."""
        out = {"dense.weight": self.dense_weight, "dense.bias": self.dense_bias}
        for i, b in enumerate(self.blocks):
            out.update(b.arrays(f"blocks.{i}."))
        out.update(self.head1.arrays("head.conv1."))
        out.update(self.head_norm.arrays("head.norm."))
        out.update(self.head2.arrays("head.conv2."))
        return out

    def zeros_like(self) -> "DecoderParams":
        return DecoderParams(self.config, np.zeros_like(self.dense_weight),
                             np.zeros_like(self.dense_bias),
                             [b.zeros_like() for b in self.blocks],
                             self.head1.zeros_like(), self.head_norm.zeros_like(),
                             self.head2.zeros_like())

    def copy(self) -> "DecoderParams":
        new = self.zeros_like()
        for (_, dst), src in zip(new.named_arrays().items(), self.named_arrays().values()):
            dst[...] = src
        return new

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.named_arrays().values())


def _check_fit(config: DecoderConfig, hierarchy: MeshHierarchy) -> None:
    if len(config.block_channels) != len(hierarchy.levels):
        raise ValueError(f"{len(config.block_channels)} blocks for a "
                         f"{len(hierarchy.levels)}-level hierarchy")


def init_decoder(config: DecoderConfig, hierarchy: MeshHierarchy) -> DecoderParams:
    """Uniform fan-based init ``U(-s, s)``, ``s = sqrt(6 / (K F_in + F_out))``."""
    _check_fit(config, hierarchy)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))

    def conv(f_in, f_out, K):
        s = np.sqrt(6.0 / (K * f_in + f_out))
        theta = rng.uniform(-s, s, size=(K, f_in, f_out))
        return ChebConvParams(theta, np.zeros(f_out) if config.use_bias else None)

    def norm(f):
        return InstanceNormParams(np.ones(f), np.zeros(f), config.eps)

    K = config.cheb_order
    ch = config.block_channels
    n0 = hierarchy.levels[-1].n_vertices
    s = np.sqrt(6.0 / (config.latent_dim + n0 * ch[0]))
    dense_w = rng.uniform(-s, s, size=(config.latent_dim, n0 * ch[0]))
    dense_b = np.zeros(n0 * ch[0])
    blocks = []
    f_in = ch[0]
    for f_out in ch:
        blocks.append(ResGCNBlockParams(
            conv(f_in, f_out, K), norm(f_out), conv(f_out, f_out, K), norm(f_out),
            None if f_in == f_out else conv(f_in, f_out, 1),
        ))
        f_in = f_out
    h1, h2 = config.head_channels
    return DecoderParams(config, dense_w, dense_b, blocks,
                         conv(f_in, h1, K), norm(h1), conv(h1, h2, K))


def count_parameters(config: DecoderConfig, coarsest_vertices: int) -> int:
    """Closed-form parameter count for a decoder built from ``config``."""
    K, ch, b = config.cheb_order, config.block_channels, int(config.use_bias)
    total = (config.latent_dim + 1) * coarsest_vertices * ch[0]
    f_in = ch[0]
    for f in ch:
        total += K * f_in * f + b * f + 2 * f + K * f * f + b * f + 2 * f
        if f_in != f:
            total += f_in * f + b * f
        f_in = f
    h1, h2 = config.head_channels
    total += K * f_in * h1 + b * h1 + 2 * h1 + K * h1 * h2 + b * h2
    return total


def decoder_forward(z: np.ndarray, hierarchy: MeshHierarchy, params: DecoderParams,
                    return_cache: bool = False):
    """Decode latent codes ``z`` of shape (..., latent_dim) to (..., N_0, 3) vertices."""
    cfg = params.config
    _check_fit(cfg, hierarchy)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cfg.latent_dim:
        raise ValueError(f"latent has {z.shape[-1]} entries, decoder expects {cfg.latent_dim}")
    per_sample = cfg.norm == "instance"
    slope = cfg.leaky_slope
    J = len(hierarchy.levels) - 1
    x = dense_forward(z, params.dense_weight, params.dense_bias,
                      hierarchy.levels[J].n_vertices, cfg.block_channels[0])
    block_caches = []
    for i, bp in enumerate(params.blocks):
        level = J - i
        x, c = resgcn_block_forward(x, hierarchy.levels[level].scaled, bp, slope, per_sample)
        block_caches.append(c)
        if level > 0:
            x = upsample_forward(x, hierarchy.pairs[level - 1].up)
    L0 = hierarchy.levels[0].scaled
    hb1 = chebyshev_basis(x, L0, params.head1.order)
    a = cheb_conv_forward(x, L0, params.head1, basis=hb1)
    n, norm_cache = instance_norm_forward(a, params.head_norm, per_sample)
    r = leaky_relu(n, slope)
    hb2 = chebyshev_basis(r, L0, params.head2.order)
    y = cheb_conv_forward(r, L0, params.head2, basis=hb2)
    if return_cache:
        return y, (z, block_caches, hb1, n, norm_cache, hb2)
    return y


def decoder_backward(z: np.ndarray, hierarchy: MeshHierarchy, params: DecoderParams,
                     upstream: np.ndarray, cache=None):
    """Gradients of ``sum(upstream * decoder_forward(z))``.

    Returns ``(grads, d_z)`` where ``grads`` is a :class:`DecoderParams` of
    gradients (summed over any leading sample axes).
    """
    if cache is None:
        _, cache = decoder_forward(z, hierarchy, params, return_cache=True)
    z, block_caches, hb1, n, norm_cache, hb2 = cache
    cfg = params.config
    slope = cfg.leaky_slope
    J = len(hierarchy.levels) - 1
    L0 = hierarchy.levels[0].scaled
    g_head2, g = cheb_conv_backward(None, L0, params.head2, upstream, basis=hb2)
    g = leaky_relu_backward(n, g, slope)
    g_head_norm, g = instance_norm_backward(norm_cache, g)
    g_head1, g = cheb_conv_backward(None, L0, params.head1, g, basis=hb1)
    g_blocks = [None] * len(params.blocks)
    for i in range(len(params.blocks) - 1, -1, -1):
        level = J - i
        if level > 0:
            g = upsample_backward(hierarchy.pairs[level - 1].up, g)
        g_blocks[i], g = resgcn_block_backward(hierarchy.levels[level].scaled,
                                               params.blocks[i], block_caches[i], g)
    d_w, d_b, d_z = dense_backward(z, params.dense_weight, g)
    grads = DecoderParams(cfg, d_w, d_b, g_blocks, g_head1, g_head_norm, g_head2)
    return grads, d_z


# ---------------------------------------------------------------------------
# toy encoder standing in for an image backbone


@dataclass
class AffineEncoder:
    """``z = features @ weight + bias``; a placeholder latent provider."""

    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def create(cls, in_dim: int, latent_dim: int, seed: int = 0) -> "AffineEncoder":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
        s = np.sqrt(6.0 / (in_dim + latent_dim))
        return cls(rng.uniform(-s, s, size=(in_dim, latent_dim)), np.zeros(latent_dim))

    def forward(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weight + self.bias

    def backward(self, features: np.ndarray, d_z: np.ndarray):
        """Returns ``(d_weight, d_bias, d_features)``."""
        f = features.reshape(-1, features.shape[-1])
        g = d_z.reshape(-1, d_z.shape[-1])
        return f.T @ g, g.sum(axis=0), d_z @ self.weight.T


# ---------------------------------------------------------------------------
# checkpoints
#
# magic "MGCNCKPT" | u32 version | u32 config length | config JSON
# | 32-byte hierarchy fingerprint | u32 section count
# | per section: u16 name length, name, u64 offset, u64 count, u8 ndim, u64 dims...
# | u64 blob length (float64 count) | blob of little-endian float64

MAGIC = b"MGCNCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: DecoderParams, hierarchy: MeshHierarchy, sink: BinaryIO) -> None:
    arrays = params.named_arrays()
    cfg = params.config.to_json().encode()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    out.write(cfg)
    out.write(bytes.fromhex(hierarchy.fingerprint()))
    out.write(struct.pack("<I", len(arrays)))
    offset = 0
    for name, a in arrays.items():
        nb = name.encode()
        out.write(struct.pack("<H", len(nb)))
        out.write(nb)
        out.write(struct.pack("<QQB", offset, a.size, a.ndim))
        out.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        offset += a.size
    out.write(struct.pack("<Q", offset))
    for a in arrays.values():
        out.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    sink.write(out.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated or has a corrupt length field")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(source: BinaryIO, hierarchy: MeshHierarchy) -> DecoderParams:
    r = _Reader(source.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a meshgcn checkpoint")
    version, cfg_len = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = DecoderConfig.from_json(r.take(cfg_len).decode())
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad config section: {exc}") from None
    fingerprint = r.take(32).hex()
    if fingerprint != hierarchy.fingerprint():
        raise CheckpointError("checkpoint was trained on a different mesh hierarchy")
    (n_sections,) = r.unpack("<I")
    table = []
    for _ in range(n_sections):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        offset, count, ndim = r.unpack("<QQB")
        shape = r.unpack(f"<{ndim}Q")
        if int(np.prod(shape)) != count:
            raise CheckpointError(f"section {name}: shape {shape} disagrees with count {count}")
        table.append((name, offset, count, shape))
    (blob_len,) = r.unpack("<Q")
    blob = np.frombuffer(r.take(8 * blob_len), dtype="<f8")
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after parameter blob")

    params = init_decoder(config, hierarchy)
    target = params.named_arrays()
    if [t[0] for t in table] != list(target):
        raise CheckpointError("checkpoint sections do not match the decoder layout")
    loaded = {}
    for name, offset, count, shape in table:
        if offset + count > blob_len:
            raise CheckpointError(f"section {name} runs past the parameter blob")
        if tuple(shape) != target[name].shape:
            raise CheckpointError(f"section {name}: shape {shape}, expected {target[name].shape}")
        loaded[name] = blob[offset:offset + count].reshape(shape)
    for name, a in loaded.items():
        target[name][...] = a
    return params


def write_checkpoint(params: DecoderParams, hierarchy: MeshHierarchy, path) -> None:
    with open(path, "wb") as fh:
        save_checkpoint(params, hierarchy, fh)


def read_checkpoint(path, hierarchy: MeshHierarchy) -> DecoderParams:
    with open(path, "rb") as fh:
        return load_checkpoint(fh, hierarchy)

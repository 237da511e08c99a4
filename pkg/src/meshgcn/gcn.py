"""Graph-convolution layers with hand-written reverse-mode gradients.

Feature arrays have shape ``(..., N, F)``: vertices on the second-to-last
axis, channels last, any number of leading sample axes. Every ``*_backward``
takes the upstream gradient with the same shape as the forward output and
returns parameter gradients (as the same container type as the parameters)
plus the gradient with respect to the input.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy import sparse

from .mesh import spmm

DEFAULT_SLOPE = 0.2
DEFAULT_EPS = 1e-5


# block-diagonal copies of L, one per batch size, so a batched product is a
# single sparse multiply on a reshaped view instead of two axis transposes
_BLOCK_CACHE: dict[int, tuple[weakref.ref, dict[int, sparse.csr_matrix]]] = {}


def _block_diagonal(L: sparse.spmatrix, copies: int) -> sparse.csr_matrix:
    key = id(L)
    entry = _BLOCK_CACHE.get(key)
    if entry is None or entry[0]() is not L:
        entry = (weakref.ref(L, lambda _, k=key: _BLOCK_CACHE.pop(k, None)), {})
        _BLOCK_CACHE[key] = entry
    blocks = entry[1]
    if copies not in blocks:
        blocks[copies] = sparse.kron(sparse.identity(copies, format="csr"), L, format="csr")
    return blocks[copies]


def graph_apply(L: sparse.spmatrix, x: np.ndarray) -> np.ndarray:
    """``L @ x`` along the vertex axis of a ``(..., N, F)`` array."""
    if x.ndim == 2:
        return spmm(L, x)
    if L.shape[1] != x.shape[-2]:
        raise ValueError(f"operator {L.shape} does not accept {x.shape[-2]} vertices")
    lead = x.shape[:-2]
    copies = int(np.prod(lead))
    flat = np.ascontiguousarray(x).reshape(copies * x.shape[-2], x.shape[-1])
    out = spmm(_block_diagonal(L, copies), flat)
    return out.reshape(lead + (L.shape[0], x.shape[-1]))


# ---------------------------------------------------------------------------
# parameter containers


class _Params:
    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                out[prefix + f.name] = value
            elif isinstance(value, _Params):
                out.update(value.arrays(prefix + f.name + "."))
        return out

    def zeros_like(self):
        kw = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, np.ndarray):
                kw[f.name] = np.zeros_like(value)
            elif isinstance(value, _Params):
                kw[f.name] = value.zeros_like()
        return replace(self, **kw)


@dataclass
class ChebConvParams(_Params):
    """Chebyshev coefficients ``theta`` of shape (K, F_in, F_out) and a bias."""

    theta: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.theta.ndim != 3 or self.theta.shape[0] < 1:
            raise ValueError(f"theta must be (K, F_in, F_out) with K >= 1, got {self.theta.shape}")
        if self.bias is not None and self.bias.shape != (self.theta.shape[2],):
            raise ValueError("bias length must equal F_out")

    @property
    def order(self) -> int:
        return self.theta.shape[0]

    @property
    def f_in(self) -> int:
        return self.theta.shape[1]

    @property
    def f_out(self) -> int:
        return self.theta.shape[2]


@dataclass
class InstanceNormParams(_Params):
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass
class ResGCNBlockParams(_Params):
    conv1: ChebConvParams
    in1: InstanceNormParams
    conv2: ChebConvParams
    in2: InstanceNormParams
    shortcut: ChebConvParams | None = None

    def __post_init__(self):
        if self.conv1.f_out != self.conv2.f_in:
            raise ValueError("conv1 output channels must feed conv2")
        if self.shortcut is None and self.conv1.f_in != self.conv2.f_out:
            raise ValueError("a channel-changing block needs a shortcut projection")
        if self.shortcut is not None and self.shortcut.order != 1:
            raise ValueError("shortcut projection must have K=1")


# ---------------------------------------------------------------------------
# Chebyshev convolution


def chebyshev_basis(x: np.ndarray, L: sparse.spmatrix, K: int) -> np.ndarray:
    """``[T_0(L) x | T_1(L) x | ... | T_{K-1}(L) x]`` concatenated on the channel axis.

    Built with the three-term recursion, so only sparse products with ``L``
    are formed. Shape ``(..., N, K * F)``.
    """
    if L.shape != (x.shape[-2], x.shape[-2]):
        raise ValueError(f"Laplacian {L.shape} does not match {x.shape[-2]} vertices")
    f = x.shape[-1]
    out = np.empty(x.shape[:-1] + (K * f,))
    out[..., :f] = x
    prev2, prev = None, x
    for k in range(1, K):
        cur = graph_apply(L, prev)
        if k > 1:
            cur = 2.0 * cur - prev2
        out[..., k * f:(k + 1) * f] = cur
        prev2, prev = prev, cur
    return out


def cheb_conv_forward(x: np.ndarray, L: sparse.spmatrix, p: ChebConvParams,
                      basis: np.ndarray | None = None) -> np.ndarray:
    """``h = sum_k T_k(L) x theta_k + bias``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.f_in:
        raise ValueError(f"input has {x.shape[-1]} channels, layer expects {p.f_in}")
    if basis is None:
        basis = chebyshev_basis(x, L, p.order)
    h = basis @ p.theta.reshape(-1, p.f_out)
    if p.bias is not None:
        h += p.bias
    return h


def cheb_conv_backward(x: np.ndarray, L: sparse.spmatrix, p: ChebConvParams,
                       grad_out: np.ndarray, basis: np.ndarray | None = None):
    """Gradients of :func:`cheb_conv_forward`; relies on ``L`` being symmetric.

    The input gradient ``sum_k T_k(L) (g theta_k^T)`` is evaluated with
    Clenshaw's recurrence, so it costs K-1 sparse products like the forward.
    """
    if basis is None:
        basis = chebyshev_basis(x, L, p.order)
    K, f = p.order, p.f_in
    flat_theta = p.theta.reshape(-1, p.f_out)
    g2 = grad_out.reshape(-1, p.f_out)
    d_theta = (basis.reshape(-1, K * f).T @ g2).reshape(p.theta.shape)
    d_bias = None if p.bias is None else g2.sum(axis=0)
    y = grad_out @ flat_theta.T
    if K == 1:
        dx = y
    else:
        b1 = np.zeros(y.shape[:-1] + (f,))
        b2 = np.zeros_like(b1)
        for k in range(K - 1, 0, -1):
            b1, b2 = y[..., k * f:(k + 1) * f] + 2.0 * graph_apply(L, b1) - b2, b1
        dx = y[..., :f] + graph_apply(L, b1) - b2
    return ChebConvParams(d_theta, d_bias), dx


# ---------------------------------------------------------------------------
# normalization


def _norm_axes(x: np.ndarray, per_sample: bool) -> tuple[int, ...]:
    # instance norm: statistics over vertices of one sample; batch norm: over
    # every sample and vertex
    return (x.ndim - 2,) if per_sample else tuple(range(x.ndim - 1))


def instance_norm_forward(x: np.ndarray, p: InstanceNormParams, per_sample: bool = True):
    """Standardize each channel over the vertex axis, then scale and shift.

    Uses the population variance. Returns ``(y, cache)``. With
    ``per_sample=False`` the statistics pool all leading axes as well
    (batch normalization), which only the convergence diagnostic uses.
    """
    if x.shape[-2] < 2:
        raise ValueError("instance normalization needs at least 2 vertices")
    axes = _norm_axes(x, per_sample)
    xc = x - x.mean(axis=axes, keepdims=True)
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv_std
    y = p.gamma * xhat + p.beta
    return y, (xhat, inv_std, p, axes)


def instance_norm_backward(cache, grad_out: np.ndarray):
    xhat, inv_std, p, axes = cache
    m = np.prod([xhat.shape[a] for a in axes])
    flat = tuple(range(xhat.ndim - 1))
    d_gamma = (grad_out * xhat).sum(axis=flat)
    d_beta = grad_out.sum(axis=flat)
    dxhat = grad_out * p.gamma
    dx = inv_std / m * (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
    )
    return InstanceNormParams(d_gamma, d_beta, p.eps), dx


# ---------------------------------------------------------------------------
# pointwise and linear maps


def leaky_relu(x: np.ndarray, slope: float = DEFAULT_SLOPE) -> np.ndarray:
    if 0 <= slope <= 1:
        return np.maximum(x, slope * x)
    return np.where(x >= 0, x, slope * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray, slope: float = DEFAULT_SLOPE):
    return grad_out * np.where(x >= 0, 1.0, slope)


def upsample_forward(x: np.ndarray, up: sparse.spmatrix) -> np.ndarray:
    if up.shape[1] != x.shape[-2]:
        raise ValueError(f"up-sampling matrix {up.shape} does not accept {x.shape[-2]} vertices")
    return graph_apply(up, x)


def upsample_backward(up: sparse.spmatrix, grad_out: np.ndarray) -> np.ndarray:
    return graph_apply(sparse.csr_matrix(up.T), grad_out)


def dense_forward(z: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                  n_vertices: int, channels: int) -> np.ndarray:
    """Affine map from latent codes to an ``(n_vertices, channels)`` feature grid."""
    if weight.shape != (z.shape[-1], n_vertices * channels):
        raise ValueError(f"dense weight {weight.shape} does not fit latent {z.shape[-1]} "
                         f"-> {n_vertices}x{channels}")
    out = z @ weight + bias
    return out.reshape(z.shape[:-1] + (n_vertices, channels))


def dense_backward(z: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Returns ``(d_weight, d_bias, d_z)``."""
    g = grad_out.reshape(grad_out.shape[:-2] + (-1,))
    zf = z.reshape(-1, z.shape[-1])
    gf = g.reshape(-1, g.shape[-1])
    return zf.T @ gf, gf.sum(axis=0), g @ weight.T


# ---------------------------------------------------------------------------
# residual block


def resgcn_block_forward(x: np.ndarray, L: sparse.spmatrix, p: ResGCNBlockParams,
                         slope: float = DEFAULT_SLOPE, per_sample: bool = True):
    """``act(IN2(conv2(act(IN1(conv1(x))))) + shortcut(x))``.

    The shortcut is the identity when channel counts match, otherwise a K=1
    convolution. Returns ``(out, cache)``.
    """
    b1 = chebyshev_basis(x, L, p.conv1.order)
    a1 = cheb_conv_forward(x, L, p.conv1, basis=b1)
    n1, c1 = instance_norm_forward(a1, p.in1, per_sample)
    r1 = leaky_relu(n1, slope)
    b2 = chebyshev_basis(r1, L, p.conv2.order)
    a2 = cheb_conv_forward(r1, L, p.conv2, basis=b2)
    n2, c2 = instance_norm_forward(a2, p.in2, per_sample)
    s = x if p.shortcut is None else cheb_conv_forward(x, L, p.shortcut)
    pre = n2 + s
    out = leaky_relu(pre, slope)
    return out, (x, b1, n1, c1, r1, b2, c2, pre, slope)


def resgcn_block_backward(L: sparse.spmatrix, p: ResGCNBlockParams, cache, grad_out):
    x, b1, n1, c1, r1, b2, c2, pre, slope = cache
    g_pre = leaky_relu_backward(pre, grad_out, slope)
    if p.shortcut is None:
        g_short, dx = None, g_pre
    else:
        g_short, dx = cheb_conv_backward(x, L, p.shortcut, g_pre, basis=x)
    g_in2, g_a2 = instance_norm_backward(c2, g_pre)
    g_conv2, g_r1 = cheb_conv_backward(r1, L, p.conv2, g_a2, basis=b2)
    g_n1 = leaky_relu_backward(n1, g_r1, slope)
    g_in1, g_a1 = instance_norm_backward(c1, g_n1)
    g_conv1, dx1 = cheb_conv_backward(x, L, p.conv1, g_a1, basis=b1)
    grads = ResGCNBlockParams(g_conv1, g_in1, g_conv2, g_in2, g_short)
    return grads, dx + dx1

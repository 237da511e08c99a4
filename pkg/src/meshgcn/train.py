"""Losses, Adam, a synthetic shape dataset and the mini-batch training loop."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .gcn import graph_apply
from .mesh import Mesh
from .model import (
    DecoderConfig,
    DecoderParams,
    decoder_backward,
    decoder_forward,
    init_decoder,
    write_checkpoint,
)
from .sampling import MeshHierarchy

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "l1", "smooth", "total", "lr")


class NumericalError(ArithmeticError):
    """A loss or gradient became NaN or infinite."""


# ---------------------------------------------------------------------------
# losses; inputs are (N, 3) or (B, N, 3), batch losses are sample means


def l1_loss(pred: np.ndarray, gt: np.ndarray):
    """Mean absolute error over every coordinate, and its gradient."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def smooth_loss(pred: np.ndarray, lap: sparse.spmatrix, reduction: str = "row_mean"):
    """Laplacian smoothness penalty on predicted vertices, and its gradient.

    ``reduction="row_mean"`` (the training objective) averages the Euclidean
    norm of each vertex row of ``lap @ pred`` over the N vertices, which puts
    it on the same per-vertex scale as :func:`l1_loss`. ``"frobenius"`` is the
    plain Frobenius norm of ``lap @ pred``. Norms below 1e-12 contribute a
    zero gradient, since the norm is not differentiable there.
    """
    if lap.shape != (pred.shape[-2], pred.shape[-2]):
        raise ValueError(f"Laplacian {lap.shape} does not match {pred.shape[-2]} vertices")
    r = graph_apply(lap, pred)
    n_samples = int(np.prod(pred.shape[:-2]))
    if reduction == "row_mean":
        rows = np.sqrt((r * r).sum(axis=-1))
        n = pred.shape[-2]
        value = rows.sum(axis=-1) / n
        safe = np.where(rows < 1e-12, np.inf, rows)
        dr = r / (safe[..., None] * n * n_samples)
    elif reduction == "frobenius":
        value = np.sqrt((r * r).sum(axis=(-2, -1)))
        safe = np.where(value < 1e-12, np.inf, value)
        dr = r / (np.asarray(safe)[..., None, None] * n_samples)
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    g = graph_apply(sparse.csr_matrix(lap.T), dr)
    return float(np.mean(value)), g


def total_loss(pred: np.ndarray, gt: np.ndarray, lap: sparse.spmatrix, alpha: float = 0.1,
               reduction: str = "row_mean"):
    """``l1 + alpha * smooth``; returns ``(total, grad, l1, smooth)``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    l1, g1 = l1_loss(pred, gt)
    sm, gs = smooth_loss(pred, lap, reduction)
    return l1 + alpha * sm, g1 + alpha * gs, l1, sm


def laplacian_residual(pred: np.ndarray, lap: sparse.spmatrix) -> float:
    """Mean over samples of ``||lap @ pred||_F / N``."""
    r = graph_apply(lap, pred)
    return float((np.sqrt((r * r).sum(axis=(-2, -1))) / pred.shape[-2]).mean())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_every: int = 20
    decay_factor: float = 0.5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self, epoch: int) -> float:
        """Step schedule: ``lr * decay_factor ** (epoch // decay_every)``, epochs from 0."""
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay_factor ** (epoch // self.decay_every)


def adam_step(params: dict, grads: dict, state: AdamState, epoch: int = 0) -> dict:
    """Bias-corrected Adam update, in place on the ``params`` arrays."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter section {name!r}")
    state.step += 1
    lr = state.learning_rate(epoch)
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticDataset:
    """Shapes ``base + sum_j z_j B_j`` for latents ``z ~ U(-1, 1)^d``.

    The displacement basis ``B`` (d, N, 3) is a fixed random blend of
    low-frequency sinusoidal fields over the base mesh.
    """

    base: Mesh
    basis: np.ndarray
    latents: np.ndarray
    shapes: np.ndarray

    def shape_of(self, z: np.ndarray) -> np.ndarray:
        return self.base.vertices + np.tensordot(z, self.basis, axes=(-1, 0))

    def sample(self, n: int, seed: int) -> "SyntheticDataset":
        """Fresh latents drawn with ``seed``, same basis (e.g. a held-out split)."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        z = rng.uniform(-1.0, 1.0, size=(n, self.basis.shape[0]))
        return SyntheticDataset(self.base, self.basis, z, self.shape_of(z))

    def __len__(self) -> int:
        return self.latents.shape[0]

    def pairs(self):
        return list(zip(self.latents, self.shapes))


def smooth_fields(base: Mesh, n_fields: int, rng: np.random.Generator,
                  max_frequency: float = 1.5) -> np.ndarray:
    """``n_fields`` smooth displacement fields on the base vertices, (n_fields, N, 3)."""
    v = base.vertices
    extent = float(np.ptp(v, axis=0).max()) or 1.0
    x = (v - v.mean(axis=0)) / extent
    out = np.empty((n_fields, v.shape[0], 3))
    for m in range(n_fields):
        k = rng.normal(size=3)
        k *= 2.0 * np.pi * rng.uniform(0.25, max_frequency) / np.linalg.norm(k)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.normal(size=3)
        out[m] = np.sin(x @ k + phase)[:, None] * amp
    return out


def generate_synthetic(base: Mesh, latent_dim: int, n_samples: int, seed: int = 0,
                       n_fields: int = 16, amplitude: float = 0.1) -> SyntheticDataset:
    """Deterministic synthetic dataset; ``amplitude`` is relative to the mesh extent."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    fields_ = smooth_fields(base, n_fields, rng)
    blend = rng.normal(size=(latent_dim, n_fields)) / np.sqrt(n_fields)
    extent = float(np.ptp(base.vertices, axis=0).max()) or 1.0
    basis = amplitude * extent * np.tensordot(blend, fields_, axes=(1, 0))
    z = rng.uniform(-1.0, 1.0, size=(n_samples, latent_dim))
    shapes = base.vertices + np.tensordot(z, basis, axes=(1, 0))
    return SyntheticDataset(base, basis, z, shapes)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 50
    lr: float = 1e-3
    decay_every: int = 20
    alpha: float = 0.1
    seed: int = 0


@dataclass
class TrainResult:
    params: DecoderParams
    history: list[dict]

    @property
    def l1_curve(self) -> np.ndarray:
        return np.array([row["l1"] for row in self.history])


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "epoch" else float(r[k])) for k in HISTORY_FIELDS} for r in rows]


def train(hierarchy: MeshHierarchy, data: SyntheticDataset, decoder_config: DecoderConfig,
          cfg: TrainConfig, out_dir=None, params: DecoderParams | None = None) -> TrainResult:
    """Mini-batch Adam on ``l1 + alpha * smooth`` against the finest level.

    Fully deterministic for a given ``cfg.seed``: initialization, shuffling
    and reduction order are fixed. With ``out_dir`` set, writes
    ``history.csv`` and ``model.ckpt`` there.
    """
    if data.shapes.shape[1] != hierarchy.levels[0].n_vertices:
        raise ValueError("dataset meshes do not match the finest hierarchy level")
    if params is None:
        params = init_decoder(decoder_config, hierarchy)
    arrays = params.named_arrays()
    state = AdamState(lr=cfg.lr, decay_every=cfg.decay_every)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    lap = hierarchy.levels[0].smooth_laplacian
    n = len(data)
    history = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            z, y = data.latents[idx], data.shapes[idx]
            pred, cache = decoder_forward(z, hierarchy, params, return_cache=True)
            loss, grad, l1, sm = total_loss(pred, y, lap, cfg.alpha)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, "
                                     f"batch starting at sample {start}")
            grads, _ = decoder_backward(z, hierarchy, params, grad, cache=cache)
            adam_step(arrays, grads.named_arrays(), state, epoch)
            sums += len(idx) * np.array([l1, sm, loss])
        l1, sm, tot = sums / n
        history.append({"epoch": epoch + 1, "l1": l1, "smooth": sm, "total": tot,
                        "lr": state.learning_rate(epoch)})
        logger.info("epoch %d  l1 %.6f  smooth %.6f  total %.6f  (%.1fs)",
                    epoch + 1, l1, sm, tot, time.perf_counter() - t0)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_history(history, out / "history.csv")
        write_checkpoint(params, hierarchy, out / "model.ckpt")
    return TrainResult(params, history)

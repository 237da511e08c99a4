"""Error metrics, cumulative error curves and ICP rigid alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial import cKDTree


def nme(pred: np.ndarray, gt: np.ndarray, d: float) -> float:
    """Normalized mean error: mean per-point Euclidean distance divided by ``d``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not d > 0:
        raise ValueError(f"normalization factor must be positive, got {d}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean() / d)


def bbox_size(points: np.ndarray) -> float:
    """``sqrt(width * height)`` of the 2D (x, y) bounding box."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError("need at least 2 points")
    w, h = np.ptp(p[:, 0]), np.ptp(p[:, 1])
    if w <= 0 or h <= 0:
        raise ValueError("bounding box has zero extent")
    return float(np.sqrt(w * h))


def bbox_diagonal(points: np.ndarray) -> float:
    """Diagonal length of the 2D (x, y) bounding box."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 2:
        raise ValueError("need at least 2 points")
    diag = float(np.hypot(np.ptp(p[:, 0]), np.ptp(p[:, 1])))
    if diag <= 0:
        raise ValueError("bounding box has zero extent")
    return diag


def interocular_distance(landmarks, left: str | int = "left_eye_outer",
                         right: str | int = "right_eye_outer") -> float:
    """Distance between the two outer eye corners.

    ``landmarks`` is a mapping from label to point, or an array indexed by
    integer labels. Returns 0 for coincident points; callers using this as a
    normalizer must reject that.
    """
    try:
        a, b = landmarks[left], landmarks[right]
    except (KeyError, IndexError):
        raise KeyError(f"landmarks lack the outer eye corners {left!r} and {right!r}") from None
    return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))


NORMALIZERS = {"bbox": bbox_size, "diagonal": bbox_diagonal}


@dataclass(frozen=True)
class CEDCurve:
    thresholds: np.ndarray
    fractions: np.ndarray
    auc: float
    cutoff: float


def ced(errors, thresholds=None, cutoff: float = 0.1, n_thresholds: int = 512) -> CEDCurve:
    """Empirical CDF of per-sample errors and its trapezoid area up to ``cutoff``.

    Default thresholds are ``n_thresholds`` uniform samples on [0, cutoff].
    """
    e = np.sort(np.asarray(errors, dtype=np.float64).ravel())
    if e.size == 0:
        raise ValueError("no errors given")
    if (e < 0).any():
        raise ValueError("errors must be non-negative")
    if thresholds is None:
        thresholds = np.linspace(0.0, cutoff, n_thresholds)
    t = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("thresholds must be ascending")
    fractions = np.searchsorted(e, t, side="right") / e.size
    inside = t <= cutoff
    auc = float(trapezoid(fractions[inside], t[inside])) if inside.sum() > 1 else 0.0
    return CEDCurve(t, fractions, auc, float(cutoff))


def write_ced(curve: CEDCurve, path) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,fraction\n")
        for t, f in zip(curve.thresholds, curve.fractions):
            fh.write(f"{float(t)!r},{float(f)!r}\n")
        fh.write(f"# auc={curve.auc!r} cutoff={curve.cutoff!r}\n")


# ---------------------------------------------------------------------------
# rigid alignment


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation

    def then(self, other: "RigidTransform") -> "RigidTransform":
        """Composition: apply ``self`` first, then ``other``."""
        return RigidTransform(other.rotation @ self.rotation,
                              other.scale * other.rotation @ self.translation + other.translation,
                              other.scale * self.scale)

    def inverse(self) -> "RigidTransform":
        r_inv = self.rotation.T
        return RigidTransform(r_inv, -(r_inv @ self.translation) / self.scale, 1.0 / self.scale)


def fit_rigid(source: np.ndarray, target: np.ndarray, with_scale: bool = False) -> RigidTransform:
    """Least-squares ``target ~ s R source + t`` for paired points (Kabsch/Umeyama)."""
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    a, b = source - mu_s, target - mu_t
    U, S, Vt = np.linalg.svd(a.T @ b)
    sign = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    D = np.diag([1.0, 1.0, sign])
    R = Vt.T @ D @ U.T
    s = 1.0
    if with_scale:
        s = float((S * np.diag(D)).sum() / (a * a).sum())
    return RigidTransform(R, mu_t - s * R @ mu_s, s)


def _check_spread(points: np.ndarray, name: str) -> None:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] < 3:
        raise ValueError(f"{name} must be an (n>=3, 3) point set")
    sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise ValueError(f"{name} points are collinear")


@dataclass(frozen=True)
class ICPResult:
    transform: RigidTransform
    aligned: np.ndarray
    rms_history: list[float]


def icp_align(source: np.ndarray, target: np.ndarray, max_iters: int = 100,
              tol: float = 1e-10, with_scale: bool = False) -> ICPResult:
    """Point-to-point ICP moving ``source`` onto ``target``.

    Each iteration matches every source point to its nearest target point
    (k-d tree) and refits the transform in closed form. ``rms_history[i]`` is
    the nearest-neighbour RMS before refit ``i``, which never increases.
    Stops when the RMS improvement falls below ``tol``.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    _check_spread(source, "source")
    _check_spread(target, "target")
    tree = cKDTree(target)
    current = RigidTransform.identity()
    moved = source
    history: list[float] = []
    for _ in range(max_iters):
        dist, idx = tree.query(moved)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        if history and history[-1] - rms < tol:
            if rms <= history[-1]:
                history.append(rms)
            break
        history.append(rms)
        current = fit_rigid(source, target[idx], with_scale)
        moved = current.apply(source)
    return ICPResult(current, moved, history)

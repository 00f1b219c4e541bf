"""Confidence-weighted algebraic triangulation with analytic gradients.

A 3D point is recovered from per-view 2D observations by the inhomogeneous
direct linear transform: view t with pixel (u_x, u_y) and projection rows
pi_1..pi_3 contributes rows

    A_t = [u_x pi_3 - pi_1 ; u_y pi_3 - pi_2]   (first three columns)
    b_t = -(fourth column of the same rows)

and the solution minimizes sum_t c_t^2 ||A_t x - b_t||^2 via the 3x3 normal
equations. Confidences weight rows, so they enter the cost squared. The
normal-equation form has closed-form gradients (implicit differentiation:
M x = r  =>  dx = M^-1 (dr - dM x)) and cannot represent points at infinity,
which do not occur in a bounded capture space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .camgeom import CameraModel, project
from .errors import IllConditioned, InsufficientViews

W_MIN = 1e-6          # confidence below this does not count as an effective view
COND_MAX = 1e12       # normal-matrix condition limit (double-precision safety)


@dataclass(frozen=True)
class ViewObservation:
    """A refined 2D position and its confidence in one view."""

    point2d: np.ndarray      # (2,) pixels
    confidence: float        # in [0, 1]
    camera_index: int

    def __post_init__(self):
        object.__setattr__(self, "point2d", np.asarray(self.point2d, dtype=float).reshape(2))
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class TriangulationResult:
    point3d: np.ndarray      # (3,) mm
    residual: float          # weighted least-squares cost at the solution
    effective_views: int


def _dlt_rows(points2d: np.ndarray, projections: np.ndarray):
    """Build DLT rows for (..., T, 2) pixels against (T, 3, 4) projections.

    Returns A (..., T, 2, 3) and b (..., T, 2).
    """
    proj3 = projections[:, 2, :]                 # (T, 4)
    proj12 = projections[:, :2, :]               # (T, 2, 4)
    full = points2d[..., :, :, None] * proj3[:, None, :] - proj12
    return full[..., :3], -full[..., 3]


def triangulate_batch(points2d: np.ndarray, confidences: np.ndarray, projections: np.ndarray):
    """Vectorized weighted DLT over N independent points sharing T cameras.

    Parameters
    ----------
    points2d : (N, T, 2) pixels
    confidences : (N, T) in [0, 1]
    projections : (T, 3, 4)

    Returns
    -------
    points3d : (N, 3); rows with ok=False are zero
    residuals : (N,)
    ok : (N,) bool; False when fewer than 2 effective views or the normal
        matrix condition number exceeds COND_MAX
    cache : dict of intermediates for triangulate_batch_vjp
    """
    points2d = np.asarray(points2d, dtype=float)
    confidences = np.asarray(confidences, dtype=float)
    A, b = _dlt_rows(points2d, projections)
    w = confidences ** 2
    M = np.einsum("ntri,nt,ntrj->nij", A, w, A)
    r = np.einsum("ntri,nt,ntr->ni", A, w, b)

    eigs = np.linalg.eigvalsh(M)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(eigs[:, 0] > 0.0, eigs[:, -1] / eigs[:, 0], np.inf)
    ok = (np.sum(confidences > W_MIN, axis=1) >= 2) & (cond <= COND_MAX)

    x = np.zeros((points2d.shape[0], 3))
    if np.any(ok):
        x[ok] = np.linalg.solve(M[ok], r[ok][..., None])[..., 0]
    rho = b - np.einsum("ntri,ni->ntr", A, x)
    residuals = np.einsum("nt,ntr,ntr->n", w, rho, rho)
    residuals = np.where(ok, residuals, 0.0)
    cache = {"A": A, "M": M, "x": x, "rho": rho, "conf": confidences,
             "proj3": projections[:, 2, :], "ok": ok}
    return x, residuals, ok, cache


def triangulate_batch_vjp(cache: dict, grad_points3d: np.ndarray):
    """Backward pass of triangulate_batch.

    Returns (grad_points2d (N, T, 2), grad_confidences (N, T)); rows that
    failed in the forward pass get zero gradients.
    """
    A, M, x, rho = cache["A"], cache["M"], cache["x"], cache["rho"]
    conf, proj3, ok = cache["conf"], cache["proj3"], cache["ok"]
    g = np.asarray(grad_points3d, dtype=float)

    lam = np.zeros_like(x)
    if np.any(ok):
        lam[ok] = np.linalg.solve(M[ok], g[ok][..., None])[..., 0]
    alpha = np.einsum("ntri,ni->ntr", A, lam)
    w = conf ** 2

    grad_conf = 2.0 * conf * np.einsum("ntr,ntr->nt", alpha, rho)
    p3_lam = np.einsum("ti,ni->nt", proj3[:, :3], lam)
    depth = np.einsum("ti,ni->nt", proj3[:, :3], x) + proj3[:, 3]
    grad_pts = w[..., None] * (p3_lam[..., None] * rho - alpha * depth[..., None])

    grad_pts[~ok] = 0.0
    grad_conf[~ok] = 0.0
    return grad_pts, grad_conf


def _gather(obs: Sequence[ViewObservation], cams: Sequence[CameraModel]):
    points = np.stack([o.point2d for o in obs])[None]                   # (1, T, 2)
    conf = np.array([o.confidence for o in obs])[None]                  # (1, T)
    proj = np.stack([cams[o.camera_index].projection for o in obs])     # (T, 3, 4)
    return points, conf, proj


def triangulate(obs: Sequence[ViewObservation], cams: Sequence[CameraModel]) -> TriangulationResult:
    """Solve one point from its view observations.

    Raises InsufficientViews when fewer than 2 observations carry confidence
    above W_MIN, and IllConditioned when the 3x3 normal matrix condition
    number exceeds 1e12 (e.g. all rays nearly collinear).
    """
    effective = sum(1 for o in obs if o.confidence > W_MIN)
    if effective < 2:
        raise InsufficientViews(f"need >= 2 effective views, got {effective}")
    points, conf, proj = _gather(obs, cams)
    x, residuals, ok, cache = triangulate_batch(points, conf, proj)
    if not ok[0]:
        # effective-view count passed, so the failure is conditioning
        raise IllConditioned("normal matrix condition number exceeds 1e12")
    return TriangulationResult(point3d=x[0], residual=float(residuals[0]), effective_views=effective)


def triangulate_vjp(obs: Sequence[ViewObservation], cams: Sequence[CameraModel],
                    upstream_grad: np.ndarray):
    """Vector-Jacobian product of triangulate's point3d.

    Returns (point2d_grads, confidence_grads): a list of (2,) arrays and a
    list of floats, ordered like `obs`. Raises exactly when triangulate does.
    """
    effective = sum(1 for o in obs if o.confidence > W_MIN)
    if effective < 2:
        raise InsufficientViews(f"need >= 2 effective views, got {effective}")
    points, conf, proj = _gather(obs, cams)
    _, _, ok, cache = triangulate_batch(points, conf, proj)
    if not ok[0]:
        raise IllConditioned("normal matrix condition number exceeds 1e12")
    g = np.asarray(upstream_grad, dtype=float).reshape(1, 3)
    grad_pts, grad_conf = triangulate_batch_vjp(cache, g)
    return [grad_pts[0, t] for t in range(len(obs))], [float(c) for c in grad_conf[0]]


def reprojection_error(p: np.ndarray, obs: Sequence[ViewObservation],
                       cams: Sequence[CameraModel]) -> float:
    """Confidence-weighted RMS pixel distance between project(p) and the observations."""
    total_w = 0.0
    total = 0.0
    for o in obs:
        d = project(p, cams[o.camera_index]) - o.point2d
        total += o.confidence * float(d @ d)
        total_w += o.confidence
    if total_w == 0.0:
        return 0.0
    return float(np.sqrt(total / total_w))

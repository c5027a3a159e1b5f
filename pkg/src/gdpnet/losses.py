"""Training objective: reconstruction, velocity and latent-constraint terms.

Each loss returns ``(value, grad)`` where ``grad`` is the gradient w.r.t. the
prediction (or the speech latent ``r`` for constraints).  The geometry latent
``r_hat`` is a fixed target and never receives gradient.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .numeric import ShapeError

CONSTRAINT_MODES = ("huber", "hsic", "none")


@dataclass(frozen=True)
class HuberParams:
    xi: float = 1.0
    reduction: str = "mean"

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError(f"Huber xi must be > 0, got {self.xi}")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel for a Gram matrix; ``bandwidth=None`` selects the median heuristic."""

    kind: str = "rbf"
    bandwidth: float | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 10.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


def _check_same(op, a, b, name="shape"):
    if a.shape != b.shape:
        raise ShapeError(op, name, a.shape, b.shape)


def reconstruction_loss(pred, truth):
    """Squared Frobenius error per mesh, averaged over the batch (axis 0)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    _check_same("reconstruction_loss", truth, pred)
    batch = pred.shape[0] if pred.ndim == 3 else 1
    diff = pred - truth
    value = float(np.sum(diff * diff)) / batch
    return value, (2.0 / batch) * diff


def velocity_loss(pred_t, pred_tm1, truth_t, truth_tm1):
    """Mismatch of frame-to-frame motion; returns ``(value, (grad_t, grad_tm1))``."""
    arrays = [np.asarray(a) for a in (pred_t, pred_tm1, truth_t, truth_tm1)]
    for a in arrays[1:]:
        _check_same("velocity_loss", arrays[0], a)
    pred_t, pred_tm1, truth_t, truth_tm1 = arrays
    batch = pred_t.shape[0] if pred_t.ndim == 3 else 1
    diff = (pred_t - pred_tm1) - (truth_t - truth_tm1)
    value = float(np.sum(diff * diff)) / batch
    g = (2.0 / batch) * diff
    return value, (g, -g)


def huber_elementwise(d, xi: float = 1.0):
    """Per-element Huber value and derivative of the residual ``d``."""
    d = np.asarray(d)
    ad = np.abs(d)
    quad = ad <= xi
    value = np.where(quad, 0.5 * d * d, xi * ad - 0.5 * xi * xi)
    deriv = np.where(quad, d, xi * np.sign(d))
    return value, deriv


def huber_constraint(r, r_hat, p: HuberParams = HuberParams()):
    r = np.asarray(r)
    r_hat = np.asarray(r_hat)
    _check_same("huber_constraint", r_hat, r, "latent")
    value, deriv = huber_elementwise(r - r_hat, p.xi)
    if p.reduction == "mean":
        n = max(r.size, 1)
        return float(value.sum()) / n, deriv / n
    return float(value.sum()), deriv


# ---------------------------------------------------------------------------
# HSIC


def _as_samples(x):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[:, None]
    return x


def _sq_dists(s):
    # direct differences: the expanded |a|^2 + |b|^2 - 2ab form cancels badly
    diff = s[:, None, :] - s[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _median_pairs(dist):
    """Median of the strictly-upper pairwise distances and the pair(s) defining it."""
    m = dist.shape[0]
    iu, ju = np.triu_indices(m, k=1)
    vals = dist[iu, ju]
    order = np.argsort(vals, kind="stable")
    n = vals.size
    if n % 2:
        picks = [order[n // 2]]
    else:
        picks = [order[n // 2 - 1], order[n // 2]]
    med = float(np.mean(vals[picks]))
    return med, [(iu[k], ju[k]) for k in picks]


def resolve_bandwidth(samples, k: KernelSpec) -> float:
    if k.bandwidth is not None:
        return float(k.bandwidth)
    s = _as_samples(samples)
    med, _ = _median_pairs(np.sqrt(_sq_dists(s)))
    return med if med > 0 else 1.0


def gram_matrix(samples, k: KernelSpec = KernelSpec()) -> np.ndarray:
    s = _as_samples(samples)
    if s.shape[0] < 2:
        raise ShapeError("gram_matrix", "m", ">= 2", s.shape[0])
    if k.kind == "linear":
        return s @ s.T
    sigma = resolve_bandwidth(s, k)
    return np.exp(-_sq_dists(s) / (2.0 * sigma * sigma))


def centering_matrix(m: int, dtype=np.float64) -> np.ndarray:
    return np.eye(m, dtype=dtype) - np.full((m, m), 1.0 / m, dtype=dtype)


def hsic_empirical(r_batch, rhat_batch, k1: KernelSpec = KernelSpec(), k2: KernelSpec = KernelSpec()):
    """Biased HSIC ``tr(K1 H K2 H) / (m - 1)^2`` and its gradient w.r.t. ``r_batch``."""
    r = _as_samples(r_batch)
    rh = _as_samples(rhat_batch)
    grad_shape = np.shape(r_batch)
    m = r.shape[0]
    if rh.shape[0] != m:
        raise ShapeError("hsic_empirical", "m", m, rh.shape[0])
    if m < 2:
        warnings.warn("HSIC skipped: batch has fewer than 2 samples", RuntimeWarning, stacklevel=2)
        return 0.0, np.zeros(grad_shape, dtype=r.dtype)
    h = centering_matrix(m, dtype=r.dtype)
    c = 1.0 / (m - 1) ** 2
    K2 = gram_matrix(rh, k2)
    M = h @ K2 @ h
    if k1.kind == "linear":
        K1 = r @ r.T
        value = c * float(np.sum(K1 * M))
        grad = 2.0 * c * (M @ r)
        return value, grad.reshape(grad_shape)

    d2 = _sq_dists(r)
    if k1.bandwidth is not None:
        sigma, pairs = float(k1.bandwidth), []
    else:
        dist = np.sqrt(d2)
        sigma, pairs = _median_pairs(dist)
        if not sigma > 0:
            sigma, pairs = 1.0, []
    K1 = np.exp(-d2 / (2.0 * sigma * sigma))
    value = c * float(np.sum(K1 * M))
    G = c * M * K1
    # through the squared distances
    grad = -(2.0 / sigma**2) * (G.sum(axis=1)[:, None] * r - G @ r)
    # through the median-heuristic bandwidth
    if pairs:
        dsigma = float(np.sum(G * d2)) / sigma**3
        share = dsigma / len(pairs)
        for i, j in pairs:
            dij = math.sqrt(d2[i, j])
            if dij > 0:
                u = (r[i] - r[j]) / dij
                grad[i] += share * u
                grad[j] -= share * u
    return value, grad.reshape(grad_shape)


def constraint_loss(r, r_hat, mode: str, huber: HuberParams = HuberParams(),
                    k1: KernelSpec = KernelSpec(), k2: KernelSpec = KernelSpec()):
    """Latent constraint selected by ablation variant.

    ``hsic`` returns the *negated* statistic so that minimising the total
    loss maximises dependence between ``r`` and ``r_hat``.
    """
    if mode == "none":
        r = np.asarray(r)
        return 0.0, np.zeros_like(r)
    if mode == "huber":
        return huber_constraint(r, r_hat, huber)
    if mode == "hsic":
        value, grad = hsic_empirical(r, r_hat, k1, k2)
        return -value, -grad
    raise ValueError(f"unknown constraint mode {mode!r}; expected one of {CONSTRAINT_MODES}")


def total_loss(recon: float, constraint: float, velocity: float, w: LossWeights = LossWeights()) -> float:
    for name, v in (("recon", recon), ("constraint", constraint), ("velocity", velocity)):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term: {name}={v}")
    return recon + w.lambda1 * constraint + w.lambda2 * velocity

"""Per-type anomaly scores and the weakly-supervised multi-type objective.

Scores: ``z[i, k]`` is the spatial mean of heatmap channel k for image i
(equivalently its L1 norm divided by u*v, the heatmaps being non-negative).

Objective, for binary labels ``y[i, k]`` and a batch of N images with M
anomaly types::

    loss = (1 / (M * N)) * sum_ik [ (1 - y_ik) * z_ik - y_ik * log(1 - exp(-z_ik)) ]

Normal entries are pushed toward zero score, anomalous entries toward large
scores. Both summands are non-negative, so the loss is non-negative, and
with all labels zero it reduces exactly to the mean of z. The anomalous log
term diverges as z -> 0, so z is clamped below at ``Z_MIN`` inside that
term, bounding the loss near log(1 / Z_MIN); the term itself is evaluated
as ``log(-expm1(-z))`` to avoid cancellation at small z.

Only image-level labels enter the objective: ground-truth masks are never
consumed here, which is what makes the training weakly supervised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

Z_MIN = 1e-8


def _check_labels(y):
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    return y


def anomaly_scores(heatmaps) -> Tensor:
    """Per-image, per-type scores: spatial mean of each heatmap channel.

    ``heatmaps`` is an (N, M, u, v) tensor with non-negative entries;
    the result is an (N, M) tensor, differentiable through the mean.
    """
    t = heatmaps if isinstance(heatmaps, Tensor) else Tensor(heatmaps)
    if t.data.min() < 0:
        raise ValueError("anomaly_scores: heatmaps must be non-negative")
    return ad.spatial_mean(t)


def multitype_loss(z, y, z_min=Z_MIN) -> Tensor:
    """Scalar training objective from scores ``z`` (N, M) and labels ``y``.

    Differentiable with respect to ``z``; the anomalous log term clamps z
    below at ``z_min``, which also zeroes its gradient there.
    """
    zt = z if isinstance(z, Tensor) else Tensor(z)
    y = _check_labels(y).astype(zt.dtype)
    if y.shape != zt.shape:
        raise ValueError(f"label shape {y.shape} does not match score shape {zt.shape}")
    anomalous_term = ad.log1mexp(ad.clamp_min(zt, z_min))
    per_entry = ad.sub(ad.mul_const(zt, 1.0 - y), ad.mul_const(anomalous_term, y))
    return ad.mean_all(per_entry)


def multitype_loss_naive(z_values, y, use_expm1=False):
    """Reference objective on raw arrays, no clamping, no autodiff.

    With ``use_expm1=False`` the anomalous term is the textbook
    ``log(1 - exp(-z))``; the stable production path must agree with this
    for z comfortably above zero.
    """
    z = np.asarray(z_values, dtype=np.float64)
    y = _check_labels(y).astype(np.float64)
    if use_expm1:
        log_term = np.log(-np.expm1(-z))
    else:
        log_term = np.log(1.0 - np.exp(-z))
    return float(((1.0 - y) * z - y * log_term).mean())


def binary_fcdd_loss(z_values, y):
    """Single-type objective: mean of (1 - y) * z - y * log(1 - exp(-z)).

    Kept as an independent code path so the multi-type objective at M = 1
    can be checked against it.
    """
    z = np.asarray(z_values, dtype=np.float64).reshape(-1)
    y = _check_labels(y).astype(np.float64).reshape(-1)
    return float(np.mean((1.0 - y) * z - y * np.log(1.0 - np.exp(-z))))


@dataclass
class GradientSignReport:
    """Sign check of d(loss)/dz against the labels."""

    n_entries: int
    n_violations: int
    grads: np.ndarray

    @property
    def passed(self):
        return self.n_violations == 0


def loss_gradient_sanity(z_values, y) -> GradientSignReport:
    """Verify the objective pushes scores in the labelled direction.

    For z > 0 the gradient must be positive on normal entries (scores are
    suppressed) and negative on anomalous entries (scores are raised).
    """
    z = np.asarray(z_values, dtype=np.float64)
    if (z <= 0).any():
        raise ValueError("loss_gradient_sanity requires strictly positive scores")
    y = _check_labels(y)
    zt = Tensor(z, requires_grad=True)
    multitype_loss(zt, y).backward()
    g = zt.grad
    violations = int(((y == 0) & (g <= 0)).sum() + ((y == 1) & (g >= 0)).sum())
    return GradientSignReport(n_entries=g.size, n_violations=violations, grads=g)


@dataclass
class BinaryEquivalenceReport:
    multitype_value: float
    binary_value: float

    @property
    def max_abs_diff(self):
        return abs(self.multitype_value - self.binary_value)


def binary_mode_equivalence(z_values, y) -> BinaryEquivalenceReport:
    """Check that the M = 1 objective equals the single-type formula."""
    z = np.asarray(z_values, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 1:
        raise ValueError("binary_mode_equivalence expects scores of shape (N, 1)")
    mt = multitype_loss(Tensor(z), np.asarray(y).reshape(z.shape)).item()
    return BinaryEquivalenceReport(multitype_value=mt, binary_value=binary_fcdd_loss(z, y))

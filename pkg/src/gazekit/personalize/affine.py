"""Least-squares similarity transform (shift, uniform scale, rotation) in 2-D.

Treating points as complex numbers, ``y = a p + t`` with ``a = s e^{i theta}``
is linear in ``(a, t)``; the centred normal equations give ``a`` in closed
form and a reflection can never arise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateGeometry


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    theta: float
    tx: float
    ty: float

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @property
    def rotation(self):
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    @property
    def translation(self):
        return np.array([self.tx, self.ty])

    def apply(self, points):
        return apply_affine(self, points)

    def inverse(self):
        inv_s = 1.0 / self.scale
        r_inv = self.rotation.T
        t = -inv_s * (r_inv @ self.translation)
        return SimilarityTransform(inv_s, _wrap(-self.theta), float(t[0]), float(t[1]))

    def to_dict(self):
        return {"scale": self.scale, "theta": self.theta, "tx": self.tx, "ty": self.ty}


def _wrap(theta):
    """Map an angle into (-pi, pi]."""
    w = math.remainder(theta, 2.0 * math.pi)
    return math.pi if w == -math.pi else w


def fit_affine(base_preds, targets):
    """Similarity transform minimizing ``sum |s R p + t - y|^2``."""
    p = np.asarray(base_preds, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if p.shape[0] < 3:
        raise DegenerateGeometry(f"need at least 3 point pairs, got {p.shape[0]}")
    pc = p[:, 0] + 1j * p[:, 1]
    yc = y[:, 0] + 1j * y[:, 1]
    pm, ym = pc.mean(), yc.mean()
    dp, dy = pc - pm, yc - ym
    spread = float(np.vdot(dp, dp).real)
    scale_ref = float(np.max(np.abs(pc))) ** 2 + 1.0
    if spread <= 1e-20 * scale_ref * len(pc):
        raise DegenerateGeometry("predictions are (numerically) coincident")
    a = np.vdot(dp, dy) / spread
    s = abs(a)
    if s == 0.0:
        raise DegenerateGeometry("best-fit scale is zero; targets uncorrelated with predictions")
    t = ym - a * pm
    return SimilarityTransform(float(s), _wrap(float(np.angle(a))), float(t.real), float(t.imag))


def apply_affine(transform, preds):
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    return transform.scale * p @ transform.rotation.T + transform.translation

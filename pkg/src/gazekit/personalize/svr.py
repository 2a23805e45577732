"""Epsilon-SVR with an RBF kernel, solved by sequential minimal optimization.

The dual is written over ``2n`` variables ``a = [alpha+, alpha-]`` with
labels ``z = [+1]*n + [-1]*n``::

    min  1/2 a^T Q a + p^T a     s.t.  z^T a = 0,  0 <= a <= C
    Q_ij = z_i z_j K(x_i mod n, x_j mod n),  p = [eps - y, eps + y]

Each iteration picks the maximal-violating ``i`` and a second index by
second-order gain, then solves the two-variable subproblem analytically.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InsufficientFrames, SolverNonConvergence
from ..evalviz import med

DEFAULT_C = 20.0
DEFAULT_GAMMA = 0.6
EPSILON_GRID = (0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0, 50.0, 100.0, 500.0, 1000.0)
_TAU = 1e-12


def rbf_kernel(a, b, gamma):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.exp(-gamma * np.maximum(d2, 0.0))


@dataclass(frozen=True)
class ScalarSvr:
    support: np.ndarray      # (k, d)
    dual_coef: np.ndarray    # (k,) alpha+ - alpha-
    bias: float
    gamma: float
    epsilon: float
    C: float
    iterations: int = 0
    max_violation: float = 0.0
    constant: bool = False

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.dual_coef.size == 0:
            return np.full(x.shape[0], self.bias)
        return rbf_kernel(x, self.support, self.gamma) @ self.dual_coef + self.bias


def _bias(a, G, z, C):
    """Offset from KKT conditions: mean over free variables, else the midpoint
    of the feasible interval."""
    zG = z * G
    at_upper = a >= C
    at_lower = a <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = zG[free].mean()
    else:
        ub_mask = (at_upper & (z < 0)) | (at_lower & (z > 0))
        lb_mask = (at_upper & (z > 0)) | (at_lower & (z < 0))
        ub = zG[ub_mask].min() if ub_mask.any() else np.inf
        lb = zG[lb_mask].max() if lb_mask.any() else -np.inf
        rho = (ub + lb) / 2.0
    return -float(rho)


def solve_dual(K, y, epsilon, C=DEFAULT_C, tol=1e-3, max_iter=200_000):
    """Return ``(beta, bias, iterations, max_violation)`` for kernel matrix ``K``.

    ``beta = alpha+ - alpha-``. Converged when the maximal KKT violation
    ``m(a) - M(a)`` drops below ``tol``.
    """
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    z = np.concatenate([np.ones(n), -np.ones(n)])
    a = np.zeros(2 * n)
    G = np.concatenate([epsilon - y, epsilon + y])
    kdiag = np.concatenate([np.diag(K), np.diag(K)])
    it = 0
    viol = np.inf
    while True:
        up = ((z > 0) & (a < C)) | ((z < 0) & (a > 0))
        low = ((z > 0) & (a > 0)) | ((z < 0) & (a < C))
        score = -z * G
        i = int(np.argmax(np.where(up, score, -np.inf)))
        m_up = score[i]
        m_low = np.where(low, score, np.inf).min()
        viol = m_up - m_low
        if viol < tol:
            break
        if it >= max_iter:
            raise SolverNonConvergence(
                f"SMO hit the iteration cap ({max_iter}) with max KKT violation {viol:.3g}",
                max_violation=float(viol))
        krow = K[i % n]
        qi = z[i] * z * np.concatenate([krow, krow])  # row i of Q
        b = m_up - score
        quad = kdiag[i] + kdiag - 2.0 * z[i] * z * qi
        quad = np.where(quad > 0, quad, _TAU)
        gain = np.where(low & (b > 0), -(b * b) / quad, np.inf)
        j = int(np.argmin(gain))
        krow_j = K[j % n]
        qj = z[j] * z * np.concatenate([krow_j, krow_j])
        ai_old, aj_old = a[i], a[j]
        if z[i] != z[j]:
            q = max(qi[i] + qj[j] + 2.0 * qi[j], _TAU)
            delta = (-G[i] - G[j]) / q
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = diff
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = -diff
            if diff > 0:
                if a[i] > C:
                    a[i] = C
                    a[j] = C - diff
            else:
                if a[j] > C:
                    a[j] = C
                    a[i] = C + diff
        else:
            q = max(qi[i] + qj[j] - 2.0 * qi[j], _TAU)
            delta = (G[i] - G[j]) / q
            total = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if total > C:
                if a[i] > C:
                    a[i] = C
                    a[j] = total - C
            else:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = total
            if total > C:
                if a[j] > C:
                    a[j] = C
                    a[i] = total - C
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = total
        G += qi * (a[i] - ai_old) + qj * (a[j] - aj_old)
        it += 1
    beta = a[:n] - a[n:]
    return beta, _bias(a, G, z, C), it, float(viol)


def fit_scalar_svr(x, y, epsilon, C=DEFAULT_C, gamma=DEFAULT_GAMMA, tol=1e-3, max_iter=200_000):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape[0] != y.size:
        raise ValueError("features and targets disagree in length")
    if y.size == 0:
        raise InsufficientFrames("no rows to fit")
    if np.ptp(y) == 0.0:
        return ScalarSvr(support=np.zeros((0, x.shape[1])), dual_coef=np.zeros(0),
                         bias=float(y[0]), gamma=gamma, epsilon=epsilon, C=C, constant=True)
    K = rbf_kernel(x, x, gamma)
    beta, bias, it, viol = solve_dual(K, y, epsilon, C=C, tol=tol, max_iter=max_iter)
    keep = beta != 0.0
    return ScalarSvr(support=x[keep].copy(), dual_coef=beta[keep].copy(), bias=bias,
                     gamma=gamma, epsilon=epsilon, C=C, iterations=it, max_violation=viol)


@dataclass(frozen=True)
class SvrModel:
    """Two independent scalar SVRs sharing hyperparameters, one per gaze axis."""

    outputs: tuple
    epsilon: float
    C: float = DEFAULT_C
    gamma: float = DEFAULT_GAMMA
    cv_scores: dict = field(default_factory=dict)

    def predict(self, features):
        return predict_svr(self, features)


def predict_svr(model, features):
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return np.stack([m.predict(f) for m in model.outputs], axis=1)


def fit_multi(x, targets, epsilon, C=DEFAULT_C, gamma=DEFAULT_GAMMA, tol=1e-3, max_iter=200_000):
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    outs = tuple(fit_scalar_svr(x, t[:, k], epsilon, C=C, gamma=gamma, tol=tol, max_iter=max_iter)
                 for k in range(t.shape[1]))
    return SvrModel(outputs=outs, epsilon=epsilon, C=C, gamma=gamma)


def kfold_indices(n, folds):
    """Contiguous folds over the current row order."""
    return [np.asarray(f) for f in np.array_split(np.arange(n), folds)]


def fit_svr(features, targets, C=DEFAULT_C, gamma=DEFAULT_GAMMA, epsilon_grid=EPSILON_GRID,
            folds=3, tol=1e-3, max_iter=200_000):
    """Grid-search epsilon by k-fold MED, then refit on all rows.

    Ties go to the smaller epsilon.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    n = x.shape[0]
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n < folds:
        raise InsufficientFrames(f"{n} rows cannot be split into {folds} folds")
    grid = sorted(float(e) for e in epsilon_grid)
    parts = kfold_indices(n, folds)
    scores = {}
    best_eps, best_score = None, np.inf
    for eps in grid:
        fold_meds = []
        for held in parts:
            train = np.setdiff1d(np.arange(n), held, assume_unique=True)
            m = fit_multi(x[train], t[train], eps, C=C, gamma=gamma, tol=tol, max_iter=max_iter)
            fold_meds.append(med(predict_svr(m, x[held]), t[held]))
        score = float(np.mean(fold_meds))
        scores[eps] = score
        if score < best_score:
            best_eps, best_score = eps, score
    final = fit_multi(x, t, best_eps, C=C, gamma=gamma, tol=tol, max_iter=max_iter)
    return SvrModel(outputs=final.outputs, epsilon=best_eps, C=C, gamma=gamma, cv_scores=scores)

"""Per-user personalization runs and their reports."""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import GazeKitError
from ..evalviz import med
from .affine import apply_affine, fit_affine
from .calibration import CalibrationSplitSpec, build_calibration_split
from .svr import DEFAULT_C, DEFAULT_GAMMA, EPSILON_GRID, fit_svr, predict_svr

METHODS = ("svr", "affine")


@dataclass
class UserData:
    """One user's frames in temporal order."""

    user_id: str
    keys: list
    dot_ids: list
    features: np.ndarray   # (n, 4)
    base_pred: np.ndarray  # (n, 2)
    truth: np.ndarray      # (n, 2)
    calibration_dots: list = None

    def __len__(self):
        return len(self.keys)

    @classmethod
    def from_rows(cls, user_id, rows, calibration_dots=None):
        return cls(
            user_id=str(user_id),
            keys=[r.key for r in rows],
            dot_ids=[r.dot_id for r in rows],
            features=np.array([r.penultimate for r in rows], dtype=np.float64).reshape(-1, 4),
            base_pred=np.array([r.base_pred for r in rows], dtype=np.float64).reshape(-1, 2),
            truth=np.array([r.truth for r in rows], dtype=np.float64).reshape(-1, 2),
            calibration_dots=calibration_dots,
        )


@dataclass
class PersonalizationReport:
    user_id: str
    method: str
    variant: str
    n_frames: int
    n_fit: int
    n_eval: int
    med_before: float
    med_after: float
    epsilon: float = None
    transform: dict = None
    eval_keys: list = field(default_factory=list, repr=False)
    eval_corrected: np.ndarray = field(default=None, repr=False)

    @property
    def enhancement(self):
        return self.med_before - self.med_after

    def to_dict(self, include_frames=False):
        d = {
            "user_id": self.user_id, "method": self.method, "variant": self.variant,
            "n_frames": self.n_frames, "n_fit": self.n_fit, "n_eval": self.n_eval,
            "med_before": self.med_before, "med_after": self.med_after,
            "enhancement": self.enhancement,
        }
        if self.epsilon is not None:
            d["epsilon"] = self.epsilon
        if self.transform is not None:
            d["transform"] = self.transform
        if include_frames:
            d["eval_keys"] = list(self.eval_keys)
            d["eval_corrected"] = np.asarray(self.eval_corrected).tolist()
        return d


def personalize_user(user, method="svr", spec=None, folds=3, C=DEFAULT_C, gamma=DEFAULT_GAMMA,
                     epsilon_grid=EPSILON_GRID, tol=1e-3):
    """Fit a correction on the user's fit frames and score it on the rest."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    spec = spec or CalibrationSplitSpec()
    fit, ev = build_calibration_split(len(user), spec, dot_ids=user.dot_ids, truth=user.truth,
                                      calibration_dots=user.calibration_dots)
    before = med(user.base_pred[ev], user.truth[ev])
    eps = transform = None
    if method == "svr":
        model = fit_svr(user.features[fit], user.truth[fit], C=C, gamma=gamma,
                        epsilon_grid=epsilon_grid, folds=folds, tol=tol)
        corrected = predict_svr(model, user.features[ev])
        eps = model.epsilon
    else:
        tf = fit_affine(user.base_pred[fit], user.truth[fit])
        corrected = apply_affine(tf, user.base_pred[ev])
        transform = tf.to_dict()
    return PersonalizationReport(
        user_id=user.user_id, method=method, variant=spec.name, n_frames=len(user),
        n_fit=int(fit.size), n_eval=int(ev.size), med_before=before,
        med_after=med(corrected, user.truth[ev]), epsilon=eps, transform=transform,
        eval_keys=[user.keys[i] for i in ev], eval_corrected=corrected,
    )


def select_users(users, top=10):
    """The ``top`` users with the most frames (ties by id); 0 keeps all."""
    ranked = sorted(users, key=lambda u: (-len(u), u.user_id))
    return ranked[:top] if top else ranked


def _job(args):
    user, method, spec, folds = args
    return personalize_user(user, method=method, spec=spec, folds=folds)


@dataclass
class PersonalizationSummary:
    method: str
    seed: int
    variants: list
    reports: list          # flat list of PersonalizationReport
    base_split: str = ""
    leakage_prone: bool = False
    folds: int = 3

    def aggregate(self, variant):
        rs = [r for r in self.reports if r.variant == variant]
        n = sum(r.n_eval for r in rs)
        if not n:
            return {"n_eval": 0, "med_before": math.nan, "med_after": math.nan, "enhancement": math.nan}
        b = math.fsum(r.med_before * r.n_eval for r in rs) / n
        a = math.fsum(r.med_after * r.n_eval for r in rs) / n
        return {"n_eval": n, "med_before": b, "med_after": a, "enhancement": b - a}

    def to_dict(self):
        return {
            "method": self.method, "seed": self.seed, "folds": self.folds,
            "base_split": self.base_split, "leakage_prone": self.leakage_prone,
            "variants": list(self.variants),
            "users": [r.to_dict() for r in self.reports],
            "aggregate": {v: self.aggregate(v) for v in self.variants},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        users = list(dict.fromkeys(r.user_id for r in self.reports))
        by = {(r.user_id, r.variant): r for r in self.reports}
        frames = {r.user_id: r.n_frames for r in self.reports}
        label = "SVR" if self.method == "svr" else "affine"
        cols = [f"{label} {v}" for v in self.variants]
        w = max(12, *(len(c) for c in cols))
        head = f"{'user':>8} {'frames':>7} " + " ".join(
            f"{'base ' + v:>{w}} {c:>{w}}" for v, c in zip(self.variants, cols))
        lines = [f"# method={self.method} seed={self.seed} folds={self.folds} "
                 f"base_split={self.base_split or 'NA'}"
                 + (" LEAKAGE-PRONE" if self.leakage_prone else ""), head]
        for u in users:
            cells = []
            for v in self.variants:
                r = by.get((u, v))
                cells.append(f"{'NA':>{w}} {'NA':>{w}}" if r is None else
                             f"{r.med_before:>{w}.3f} {r.med_after:>{w}.3f}")
            lines.append(f"{u:>8} {frames[u]:>7d} " + " ".join(cells))
        agg = []
        for v in self.variants:
            a = self.aggregate(v)
            agg.append(f"{a['med_before']:>{w}.3f} {a['med_after']:>{w}.3f}")
        lines.append(f"{'mean':>8} {'':>7} " + " ".join(agg))
        return "\n".join(lines) + "\n"


def run_personalization(users, method="svr", variants=None, seed=0, folds=3, workers=None,
                        base_split="", on_error=None):
    """Personalize every user under every split variant.

    Users for whom a variant is infeasible are skipped and passed to
    ``on_error(user_id, variant, exc)`` when given. Results are ordered by
    user (input order) then variant regardless of ``workers``.
    """
    variants = variants or [CalibrationSplitSpec(seed=seed)]
    jobs = [(u, method, v, folds) for u in users for v in variants]
    if workers is None:
        workers = os.cpu_count() or 1
    results = []
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_job, j) for j in jobs]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except GazeKitError as exc:
                    outcomes.append(exc)
    else:
        outcomes = []
        for j in jobs:
            try:
                outcomes.append(_job(j))
            except GazeKitError as exc:
                outcomes.append(exc)
    for (u, _, v, _), out in zip(jobs, outcomes):
        if isinstance(out, Exception):
            if on_error:
                on_error(u.user_id, v.name, out)
            continue
        results.append(out)
    return PersonalizationSummary(method=method, seed=seed, variants=[v.name for v in variants],
                                  reports=results, base_split=base_split,
                                  leakage_prone=base_split == "google", folds=folds)

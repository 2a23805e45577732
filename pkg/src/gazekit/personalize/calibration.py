"""Per-user fit/evaluation splits for personalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientFrames, MissingCalibrationDots

STRATEGIES = ("random_ratio", "unique_ground_truth", "no_shuffle", "calibration_13")
MIN_FRAMES = 10
CALIBRATION_DOTS = 13


@dataclass(frozen=True)
class CalibrationSplitSpec:
    strategy: str = "random_ratio"
    fit_fraction: float = 0.7
    shuffle: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown calibration strategy {self.strategy!r}")
        if not 0.0 < self.fit_fraction < 1.0:
            raise ValueError("fit_fraction must lie in (0, 1)")

    @property
    def name(self):
        if self.strategy in ("random_ratio", "no_shuffle"):
            frac = "2/3" if abs(self.fit_fraction - 2 / 3) < 1e-9 else f"{self.fit_fraction:g}"
            shuffled = self.strategy == "random_ratio" and self.shuffle
            return f"{frac}:{'shuffle' if shuffled else 'noshuffle'}"
        if self.strategy == "unique_ground_truth":
            return "unique"
        return "cal13"

    @classmethod
    def parse(cls, text, seed=0):
        """Parse ``0.7:shuffle``, ``2/3:noshuffle``, ``unique`` or ``cal13``."""
        text = text.strip()
        if text in ("unique", "unique_ground_truth"):
            return cls("unique_ground_truth", seed=seed)
        if text in ("cal13", "calibration_13"):
            return cls("calibration_13", seed=seed)
        frac, _, mode = text.partition(":")
        if "/" in frac:
            num, den = frac.split("/")
            value = float(num) / float(den)
        else:
            value = float(frac)
        mode = mode or "shuffle"
        if mode not in ("shuffle", "noshuffle"):
            raise ValueError(f"bad split variant {text!r}")
        if mode == "shuffle":
            return cls("random_ratio", value, True, seed)
        return cls("no_shuffle", value, False, seed)


def peripheral_dots(dot_ids, truth, count=CALIBRATION_DOTS):
    """The ``count`` distinct dots farthest from the centroid of all distinct
    dot locations (ties broken by dot id)."""
    ids = list(dict.fromkeys(dot_ids))
    if len(ids) < count:
        raise MissingCalibrationDots(f"only {len(ids)} distinct dots; {count} needed")
    arr_ids = np.asarray(dot_ids, dtype=object)
    truth = np.asarray(truth, dtype=np.float64)
    pos = np.array([truth[arr_ids == d][0] for d in ids])
    center = pos.mean(axis=0)
    dist = np.hypot(*(pos - center).T)
    order = sorted(range(len(ids)), key=lambda k: (-dist[k], str(ids[k])))
    return [ids[k] for k in order[:count]]


def build_calibration_split(n_frames, spec, dot_ids=None, truth=None, calibration_dots=None):
    """Return ``(fit_idx, eval_idx)`` into a user's temporally ordered frames."""
    if n_frames < MIN_FRAMES:
        raise InsufficientFrames(f"user has {n_frames} frames; at least {MIN_FRAMES} required")
    rng = np.random.default_rng(spec.seed)
    idx = np.arange(n_frames)
    if spec.strategy in ("random_ratio", "no_shuffle"):
        order = rng.permutation(n_frames) if spec.strategy == "random_ratio" and spec.shuffle else idx
        k = int(round(spec.fit_fraction * n_frames))
        k = min(max(k, 1), n_frames - 1)
        return order[:k], order[k:]
    if dot_ids is None:
        raise MissingCalibrationDots(f"strategy {spec.strategy} needs per-frame dot ids")
    ids = np.asarray(dot_ids, dtype=object)
    if ids.size != n_frames:
        raise ValueError("dot_ids length does not match frame count")
    if spec.strategy == "unique_ground_truth":
        fit = []
        for d in dict.fromkeys(ids.tolist()):
            members = idx[ids == d]
            fit.append(int(rng.choice(members)))
        fit = np.sort(np.asarray(fit))
        if spec.shuffle:
            fit = rng.permutation(fit)
        return fit, np.setdiff1d(idx, fit)
    # calibration_13
    if calibration_dots is None:
        if truth is None:
            raise MissingCalibrationDots("no calibration dots marked and no gaze targets to pick them")
        calibration_dots = peripheral_dots(ids.tolist(), truth)
    cal = set(calibration_dots)
    mask = np.array([d in cal for d in ids.tolist()])
    if not mask.any():
        raise MissingCalibrationDots("none of the user's frames fall on calibration dots")
    if mask.all():
        raise InsufficientFrames("every frame is a calibration frame; nothing left to evaluate")
    fit = idx[mask]
    if spec.shuffle:
        fit = rng.permutation(fit)
    return fit, idx[~mask]

"""Accuracy metrics, hierarchical error reports, SVG scatter scenes and CSV export."""
from __future__ import annotations

import csv
import io
import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyInput, ShapeMismatch

# ----------------------------------------------------------------------------
# metric


def _pairs(preds, truth):
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if t.ndim == 1:
        t = t[None, :]
    if p.shape != t.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ShapeMismatch(f"expected matching (n, 2) arrays, got {p.shape} and {t.shape}")
    if p.shape[0] == 0:
        raise EmptyInput("no frames to score")
    return p, t


def per_frame_errors(preds, truth):
    p, t = _pairs(preds, truth)
    return np.hypot(p[:, 0] - t[:, 0], p[:, 1] - t[:, 1])


def med(preds, truth):
    """Mean Euclidean distance in cm between predicted and true gaze points."""
    return float(per_frame_errors(preds, truth).mean())


# ----------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    scope: str
    med_cm: float
    count: int
    label: str = ""
    breakdown: list = field(default_factory=list)
    noncal_med_cm: float = None
    noncal_count: int = 0

    def to_dict(self):
        d = {"scope": self.scope, "label": self.label, "med_cm": self.med_cm,
             "count": self.count}
        if self.noncal_med_cm is not None or self.noncal_count:
            d["noncal_med_cm"] = self.noncal_med_cm
            d["noncal_count"] = self.noncal_count
        if self.breakdown:
            d["breakdown"] = [c.to_dict() for c in self.breakdown]
        return d

    def rows(self, depth=0):
        yield depth, self
        for child in self.breakdown:
            yield from child.rows(depth + 1)

    def to_text(self):
        lines = [f"{'group':<40} {'frames':>8} {'MED(cm)':>9} {'non-cal':>8} {'MED(cm)':>9}"]
        for depth, r in self.rows():
            name = ("  " * depth + (r.label or r.scope))[:40]
            nc = "NA" if r.noncal_med_cm is None else f"{r.noncal_med_cm:.3f}"
            lines.append(f"{name:<40} {r.count:>8d} {r.med_cm:>9.3f} {r.noncal_count:>8d} {nc:>9}")
        return "\n".join(lines) + "\n"


def merge_reports(children, scope="aggregate", label=""):
    """Frame-count-weighted combination of child reports."""
    count = sum(c.count for c in children)
    if count == 0:
        return EvalReport(scope=scope, med_cm=float("nan"), count=0, label=label,
                          breakdown=list(children))
    total = math.fsum(c.med_cm * c.count for c in children if c.count)
    nc_count = sum(c.noncal_count for c in children)
    nc = None
    if nc_count:
        nc = math.fsum(c.noncal_med_cm * c.noncal_count for c in children if c.noncal_count) / nc_count
    return EvalReport(scope=scope, med_cm=total / count, count=count, label=label,
                      breakdown=list(children), noncal_med_cm=nc, noncal_count=nc_count)


def _leaf(errors, calibration, scope, label):
    errors = np.asarray(errors, dtype=np.float64)
    r = EvalReport(scope=scope, label=label, count=int(errors.size),
                   med_cm=float(errors.mean()) if errors.size else float("nan"))
    if calibration is not None:
        keep = errors[~calibration]
        r.noncal_count = int(keep.size)
        r.noncal_med_cm = float(keep.mean()) if keep.size else None
    return r


def build_report(errors, groups=None, levels=("split", "device", "user"), calibration=None,
                 label="all"):
    """Aggregate per-frame errors into a nested :class:`EvalReport`.

    ``groups`` maps a level name to a per-frame sequence of group labels; the
    hierarchy follows ``levels`` (missing ones are skipped). ``calibration`` is
    an optional boolean mask of frames on calibration dots, excluded from the
    ``noncal_*`` sub-metric.
    """
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    groups = groups or {}
    levels = [lv for lv in levels if lv in groups]
    cal = None if calibration is None else np.asarray(calibration, dtype=bool).reshape(-1)
    for name in levels:
        if len(groups[name]) != errors.size:
            raise ShapeMismatch(f"group column {name!r} has {len(groups[name])} entries for {errors.size} frames")
    if cal is not None and cal.size != errors.size:
        raise ShapeMismatch("calibration mask length does not match errors")
    scopes = {"split": "split", "user": "user"}

    def build(idx, depth, scope, name):
        if depth == len(levels):
            return _leaf(errors[idx], None if cal is None else cal[idx], scope, name)
        level = levels[depth]
        col = np.asarray(groups[level], dtype=object)[idx]
        children = []
        for value in sorted(set(col.tolist()), key=str):
            sub = idx[col == value]
            children.append(build(sub, depth + 1, scopes.get(level, "split"), f"{level}={value}"))
        return merge_reports(children, scope=scope, label=name)

    idx = np.arange(errors.size)
    if not levels:
        return _leaf(errors, cal, "aggregate", label)
    return build(idx, 0, "aggregate", label)


# ----------------------------------------------------------------------------
# SVG scatter scenes

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd",
)


def dot_color(dot_id):
    return PALETTE[zlib.crc32(str(dot_id).encode("utf-8")) % len(PALETTE)]


@dataclass
class ScatterScene:
    """One user's gaze plot: truth '+', prediction dots, per-dot centroids,
    the camera star at the origin and optional base-to-personalized segments."""

    truth: np.ndarray            # (n, 2) per-frame ground truth
    preds: np.ndarray            # (n, 2) per-frame predictions
    dot_ids: list
    corrected: np.ndarray = None  # (n, 2) personalized predictions, optional
    title: str = ""

    def __post_init__(self):
        self.truth = np.asarray(self.truth, dtype=np.float64).reshape(-1, 2)
        self.preds = np.asarray(self.preds, dtype=np.float64).reshape(-1, 2)
        self.dot_ids = list(self.dot_ids)
        if self.corrected is not None:
            self.corrected = np.asarray(self.corrected, dtype=np.float64).reshape(-1, 2)
        n = len(self.dot_ids)
        if self.truth.shape[0] != n or self.preds.shape[0] != n or (
                self.corrected is not None and self.corrected.shape[0] != n):
            raise ShapeMismatch("scene arrays must all have one row per frame")

    def dots(self):
        """Distinct dots in first-appearance order with truth and centroid."""
        order = list(dict.fromkeys(self.dot_ids))
        ids = np.asarray(self.dot_ids, dtype=object)
        out = []
        for d in order:
            m = ids == d
            out.append((d, self.truth[m][0], self.preds[m].mean(axis=0)))
        return out


def _fmt(v):
    s = f"{v:.3f}"
    return "0.000" if s == "-0.000" else s


def render_scatter(scene, width=480, height=640, margin=40):
    """Deterministic SVG 1.1 rendering of ``scene`` (cm mapped to the viewport)."""
    if not scene.dot_ids:
        raise EmptyInput("scatter scene has no frames")
    pts = [scene.truth, scene.preds, np.zeros((1, 2))]
    if scene.corrected is not None:
        pts.append(scene.corrected)
    allp = np.vstack(pts)
    lo = allp.min(axis=0)
    hi = allp.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    s = min((width - 2 * margin) / span[0], (height - 2 * margin) / span[1])

    def xy(p):
        return margin + (p[0] - lo[0]) * s, margin + (p[1] - lo[1]) * s

    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
    ]
    if scene.title:
        title = (scene.title.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;"))
        out.append(f"<title>{title}</title>")
    out.append(f'<rect class="frame" x="0" y="0" width="{width}" height="{height}" fill="white"/>')
    if scene.corrected is not None:
        out.append('<g class="corrections" stroke-width="0.6" opacity="0.6">')
        for i, d in enumerate(scene.dot_ids):
            x1, y1 = xy(scene.preds[i])
            x2, y2 = xy(scene.corrected[i])
            out.append(f'<line class="correction" x1="{_fmt(x1)}" y1="{_fmt(y1)}" '
                       f'x2="{_fmt(x2)}" y2="{_fmt(y2)}" stroke="{dot_color(d)}"/>')
        out.append("</g>")
    out.append('<g class="predictions">')
    for i, d in enumerate(scene.dot_ids):
        cx, cy = xy(scene.preds[i])
        out.append(f'<circle class="prediction" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="2" fill="{dot_color(d)}"/>')
    out.append("</g>")
    out.append('<g class="ground-truth" stroke-width="2">')
    for d, t, _ in scene.dots():
        x, y = xy(t)
        out.append(f'<path class="truth" data-dot="{d}" d="M {_fmt(x - 6)} {_fmt(y)} H {_fmt(x + 6)} '
                   f'M {_fmt(x)} {_fmt(y - 6)} V {_fmt(y + 6)}" stroke="{dot_color(d)}" fill="none"/>')
    out.append("</g>")
    out.append('<g class="centroids">')
    for d, _, c in scene.dots():
        x, y = xy(c)
        # tri-down: apex below the centroid, flat edge above
        out.append(f'<polygon class="centroid" data-dot="{d}" points="{_fmt(x - 5)},{_fmt(y - 3)} '
                   f'{_fmt(x + 5)},{_fmt(y - 3)} {_fmt(x)},{_fmt(y + 5)}" fill="none" '
                   f'stroke="{dot_color(d)}" stroke-width="1.5"/>')
    out.append("</g>")
    sx, sy = xy((0.0, 0.0))
    star = []
    for k in range(10):
        r = 8 if k % 2 == 0 else 3.5
        a = -math.pi / 2 + k * math.pi / 5
        star.append(f"{_fmt(sx + r * math.cos(a))},{_fmt(sy + r * math.sin(a))}")
    out.append(f'<polygon class="camera" points="{" ".join(star)}" fill="black"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ----------------------------------------------------------------------------
# CSV

CSV_HEADER = ("frame_key", "truth_x", "truth_y", "base_x", "base_y",
              "personalized_x", "personalized_y", "error_cm")


def _num(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def export_csv(rows, path=None):
    """Write per-frame results; ``rows`` yield ``(key, truth, base, personalized)``.

    ``error_cm`` is measured for the personalized prediction when present,
    otherwise for the base prediction. Returns the CSV text.
    """
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(CSV_HEADER)
    for key, truth, base, pers in rows:
        used = base if pers is None else pers
        err = math.hypot(used[0] - truth[0], used[1] - truth[1])
        w.writerow([key, _num(truth[0]), _num(truth[1]), _num(base[0]), _num(base[1]),
                    _num(None if pers is None else pers[0]), _num(None if pers is None else pers[1]),
                    _num(err)])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


def read_csv(text_or_path):
    """Parse :func:`export_csv` output back into dicts of floats (None if blank)."""
    if isinstance(text_or_path, str) and text_or_path.startswith(CSV_HEADER[0]):
        fh = io.StringIO(text_or_path, newline="")
    else:
        fh = open(text_or_path, encoding="utf-8", newline="")
    with fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            rec = {"frame_key": row["frame_key"]}
            for k in CSV_HEADER[1:]:
                rec[k] = float(row[k]) if row[k] != "" else None
            out.append(rec)
    return out

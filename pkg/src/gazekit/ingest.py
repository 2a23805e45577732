"""GazeCapture-style participant directories to a validated JSON Lines manifest.

Per participant directory the adapter reads (one array entry per frame):

========================  ==================================================
``frames.json``           list of frame image file names (``00012.jpg``)
``appleFace.json``        ``X, Y, W, H, IsValid`` face box in image pixels
``appleLeftEye.json``     ``X, Y, W, H, IsValid`` relative to the face box
``appleRightEye.json``    same for the right eye
``dotInfo.json``          ``DotNum`` (stimulus index), ``XCam, YCam`` (cm)
``screen.json``           ``Orientation`` (1..4, UIInterfaceOrientation)
``info.json``             ``DeviceName`` and ``Dataset`` (train/val/test)
``landmarks.json``        optional; per frame 8 floats or null
========================  ==================================================

Gaze coordinates are copied verbatim from ``XCam``/``YCam``: centimetres
relative to the front camera, which is the origin.
"""
from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import GazeKitError, LengthMismatch, MalformedJson, MissingSidecar

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
ORIENTATIONS = {1: "portrait", 2: "portrait_upside_down", 3: "landscape_right", 4: "landscape_left"}
REQUIRED_SIDECARS = ("frames.json", "appleFace.json", "appleLeftEye.json", "appleRightEye.json",
                     "dotInfo.json", "screen.json", "info.json")
CORNER_SLACK = 0.25


@dataclass(frozen=True)
class GazePoint:
    x_cm: float
    y_cm: float

    def __post_init__(self):
        if not (math.isfinite(self.x_cm) and math.isfinite(self.y_cm)):
            raise ValueError(f"gaze point must be finite, got ({self.x_cm}, {self.y_cm})")


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def inflate(self, frac):
        dx, dy = self.w * frac / 2.0, self.h * frac / 2.0
        return Box(self.x - dx, self.y - dy, self.w + 2 * dx, self.h + 2 * dy)

    def contains(self, px, py):
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h

    def within(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height

    @property
    def center(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0


@dataclass(frozen=True)
class FrameRecord:
    """One frame. ``eye_corners`` is ``[l_inner, l_outer, r_inner, r_outer]``
    as 8 scalars (x, y pairs) in image pixels, or None when absent."""

    participant_id: str
    frame_index: int
    image_path: str
    gaze: GazePoint
    dot_id: int
    face_box: Box | None
    left_eye_box: Box | None
    right_eye_box: Box | None
    eye_corners: tuple | None
    device_model: str
    orientation: str
    face_valid: bool
    eyes_valid: bool
    image_size: tuple | None = None

    @property
    def key(self):
        return f"{self.participant_id}/{self.frame_index:05d}"

    def corners(self):
        """Eye-corner landmarks, falling back to eye-box midline endpoints."""
        if self.eye_corners is not None:
            return tuple(self.eye_corners)
        if self.left_eye_box is None or self.right_eye_box is None:
            raise ValueError(f"{self.key}: no landmarks and no eye boxes")
        lc, rc = self.left_eye_box.center, self.right_eye_box.center
        out = []
        for box, other in ((self.left_eye_box, rc), (self.right_eye_box, lc)):
            cy = box.y + box.h / 2.0
            a, b = (box.x, cy), (box.x + box.w, cy)
            # inner corner is the end closer to the other eye
            if abs(a[0] - other[0]) <= abs(b[0] - other[0]):
                out.extend([*a, *b])
            else:
                out.extend([*b, *a])
        return tuple(out)

    def to_json(self):
        d = asdict(self)
        d["gaze"] = [self.gaze.x_cm, self.gaze.y_cm]
        for k in ("face_box", "left_eye_box", "right_eye_box"):
            b = getattr(self, k)
            d[k] = None if b is None else [b.x, b.y, b.w, b.h]
        d["eye_corners"] = None if self.eye_corners is None else list(self.eye_corners)
        d["image_size"] = None if self.image_size is None else list(self.image_size)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d):
        def box(v):
            return None if v is None else Box(*map(float, v))

        return cls(
            participant_id=str(d["participant_id"]),
            frame_index=int(d["frame_index"]),
            image_path=str(d["image_path"]),
            gaze=GazePoint(*map(float, d["gaze"])),
            dot_id=int(d["dot_id"]),
            face_box=box(d.get("face_box")),
            left_eye_box=box(d.get("left_eye_box")),
            right_eye_box=box(d.get("right_eye_box")),
            eye_corners=None if d.get("eye_corners") is None else tuple(map(float, d["eye_corners"])),
            device_model=str(d.get("device_model", "")),
            orientation=str(d.get("orientation", "portrait")),
            face_valid=bool(d.get("face_valid", True)),
            eyes_valid=bool(d.get("eyes_valid", True)),
            image_size=None if d.get("image_size") is None else tuple(int(v) for v in d["image_size"]),
        )


@dataclass
class Manifest:
    records: list
    source_root: str = ""
    schema_version: int = SCHEMA_VERSION
    roster: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_key(self):
        return {r.key: r for r in self.records}

    def participants(self):
        return sorted({r.participant_id for r in self.records})

    def subset(self, records):
        return Manifest(list(records), self.source_root, self.schema_version, dict(self.roster))


# ----------------------------------------------------------------------------
# reading sidecars


def _read_json(path):
    if not path.is_file():
        raise MissingSidecar(f"missing sidecar file: {path}")
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedJson(f"{path}: not UTF-8 at byte {exc.start}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise MalformedJson(f"{path}: invalid JSON at byte {offset} (line {exc.lineno}): {exc.msg}") from exc


def _column(obj, name, path):
    try:
        return obj[name]
    except (KeyError, TypeError):
        raise MalformedJson(f"{path}: missing field {name!r}") from None


_INDEX_RE = re.compile(r"(\d+)")


def _frame_index(name):
    m = _INDEX_RE.search(Path(name).stem)
    if not m:
        raise MalformedJson(f"frame file name {name!r} carries no index")
    return int(m.group(1))


def _image_size(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            return tuple(im.size)
    except OSError:
        return None


def parse_participant(directory, root=None, read_image_sizes=True):
    """Records for every frame listed in ``frames.json`` of one participant."""
    directory = Path(directory)
    root = Path(root) if root is not None else directory.parent
    pid = directory.name
    side = {name: _read_json(directory / name) for name in REQUIRED_SIDECARS}
    frames = side["frames.json"]
    if not isinstance(frames, list):
        raise MalformedJson(f"{directory / 'frames.json'}: expected a list of file names")
    n = len(frames)
    cols = {}
    spec = {
        "appleFace.json": ("X", "Y", "W", "H", "IsValid"),
        "appleLeftEye.json": ("X", "Y", "W", "H", "IsValid"),
        "appleRightEye.json": ("X", "Y", "W", "H", "IsValid"),
        "dotInfo.json": ("DotNum", "XCam", "YCam"),
        "screen.json": ("Orientation",),
    }
    for fname, names in spec.items():
        for name in names:
            col = _column(side[fname], name, directory / fname)
            if not isinstance(col, list) or len(col) != n:
                got = len(col) if isinstance(col, list) else type(col).__name__
                raise LengthMismatch(f"{directory / fname}: {name} has {got} entries, frames.json lists {n}")
            cols[(fname, name)] = col
    landmarks = None
    if (directory / "landmarks.json").is_file():
        landmarks = _read_json(directory / "landmarks.json")
        if not isinstance(landmarks, list) or len(landmarks) != n:
            raise LengthMismatch(f"{directory / 'landmarks.json'}: expected {n} entries")
    info = side["info.json"]
    device = str(info.get("DeviceName", "")) if isinstance(info, dict) else ""
    records = []
    for i, fname in enumerate(frames):
        def c(f, k):
            return cols[(f, k)][i]

        face_valid = bool(c("appleFace.json", "IsValid"))
        face = Box(*(float(c("appleFace.json", k)) for k in "XYWH")) if face_valid else None
        eyes = []
        for f in ("appleLeftEye.json", "appleRightEye.json"):
            if face is not None and bool(c(f, "IsValid")):
                eyes.append(Box(face.x + float(c(f, "X")), face.y + float(c(f, "Y")),
                                float(c(f, "W")), float(c(f, "H"))))
            else:
                eyes.append(None)
        eyes_valid = eyes[0] is not None and eyes[1] is not None
        corners = None
        if landmarks is not None and landmarks[i] is not None:
            if len(landmarks[i]) != 8:
                raise LengthMismatch(f"{directory / 'landmarks.json'}: frame {i} has {len(landmarks[i])} values, expected 8")
            corners = tuple(float(v) for v in landmarks[i])
        orient = ORIENTATIONS.get(int(c("screen.json", "Orientation")))
        if orient is None:
            raise MalformedJson(f"{directory / 'screen.json'}: unknown orientation {c('screen.json', 'Orientation')}")
        rel = (directory / "frames" / fname).relative_to(root).as_posix() if _is_under(directory, root) \
            else (directory / "frames" / fname).as_posix()
        size = _image_size(directory / "frames" / fname) if read_image_sizes else None
        records.append(FrameRecord(
            participant_id=pid,
            frame_index=_frame_index(fname),
            image_path=rel,
            gaze=GazePoint(float(c("dotInfo.json", "XCam")), float(c("dotInfo.json", "YCam"))),
            dot_id=int(c("dotInfo.json", "DotNum")),
            face_box=face,
            left_eye_box=eyes[0],
            right_eye_box=eyes[1],
            eye_corners=corners,
            device_model=device,
            orientation=orient,
            face_valid=face_valid,
            eyes_valid=eyes_valid,
            image_size=size,
        ))
    records.sort(key=lambda r: r.frame_index)
    return records


def _is_under(path, root):
    try:
        Path(path).resolve().relative_to(Path(root).resolve())
        return True
    except ValueError:
        return False


def participant_roster(root):
    """``participant -> split`` labels from each ``info.json`` ``Dataset`` field."""
    roster = {}
    names = {"train": "train", "val": "validation", "validation": "validation", "test": "test"}
    for d in sorted(Path(root).iterdir()):
        p = d / "info.json"
        if d.is_dir() and p.is_file():
            info = _read_json(p)
            label = names.get(str(info.get("Dataset", "")).lower()) if isinstance(info, dict) else None
            if label:
                roster[d.name] = label
    return roster


def build_manifest(root, workers=1, read_image_sizes=True):
    root = Path(root)
    if not root.is_dir():
        raise GazeKitError(f"dataset root does not exist: {root}")
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "frames.json").exists())
    if not dirs:
        log.warning("no participant directories under %s; manifest is empty", root)

    def one(d):
        try:
            return parse_participant(d, root=root, read_image_sizes=read_image_sizes)
        except GazeKitError as exc:
            raise type(exc)(f"participant {d.name}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, dirs))
    else:
        parts = [one(d) for d in dirs]
    records = [r for part in parts for r in part]
    records.sort(key=lambda r: (r.participant_id, r.frame_index))
    return Manifest(records=records, source_root=str(root), roster=participant_roster(root))


# ----------------------------------------------------------------------------
# serialization


def dumps_manifest(manifest):
    header = {"manifest": {"schema_version": manifest.schema_version,
                           "source_root": manifest.source_root,
                           "roster": dict(sorted(manifest.roster.items()))}}
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    lines.extend(r.to_json() for r in manifest.records)
    return "\n".join(lines) + "\n"


def save_manifest(manifest, path):
    Path(path).write_text(dumps_manifest(manifest), encoding="utf-8")


def loads_manifest(text, name="<manifest>"):
    records = []
    meta = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedJson(f"{name}:{lineno}: invalid JSON at column {exc.colno}: {exc.msg}") from exc
        if isinstance(obj, dict) and "manifest" in obj and lineno == 1:
            meta = obj["manifest"]
            continue
        try:
            records.append(FrameRecord.from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedJson(f"{name}:{lineno}: bad record: {exc}") from exc
    return Manifest(records=records, source_root=meta.get("source_root", ""),
                    schema_version=int(meta.get("schema_version", SCHEMA_VERSION)),
                    roster=dict(meta.get("roster", {})))


def load_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise GazeKitError(f"manifest not found: {path}")
    return loads_manifest(path.read_text(encoding="utf-8"), name=str(path))


def import_generic(path, source_root=""):
    """Import a non-GazeCapture dataset described by one JSON file holding a
    list of record objects with the manifest's field names."""
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, list):
        raise MalformedJson(f"{path}: expected a JSON list of records")
    try:
        records = [FrameRecord.from_dict(d) for d in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedJson(f"{path}: bad record: {exc}") from exc
    records.sort(key=lambda r: (r.participant_id, r.frame_index))
    return Manifest(records=records, source_root=str(source_root or path.parent))


# ----------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    records_checked: int = 0

    @property
    def ok(self):
        return not self.violations

    def add(self, key, kind, message):
        self.violations.append({"key": key, "kind": kind, "message": message})

    def to_dict(self):
        return {"records_checked": self.records_checked, "violation_count": len(self.violations),
                "violations": self.violations}


def validate(manifest, root=None, check_paths=True):
    """List invariant violations without touching the manifest."""
    report = ValidationReport(records_checked=len(manifest.records))
    root = Path(root if root is not None else manifest.source_root or ".")
    seen = set()
    prev = None
    for r in manifest.records:
        key = r.key
        if key in seen:
            report.add(key, "duplicate_key", f"duplicate record {key}")
        seen.add(key)
        order = (r.participant_id, r.frame_index)
        if prev is not None and order < prev:
            report.add(key, "ordering", f"record {key} out of (participant, frame) order")
        prev = order
        size = r.image_size
        if check_paths:
            p = root / r.image_path
            if not p.is_file():
                report.add(key, "unresolvable_path", f"image {r.image_path} not found under {root}")
            elif size is None:
                size = _image_size(p)
        if r.eyes_valid:
            if r.left_eye_box is None or r.right_eye_box is None:
                report.add(key, "missing_eye_box", "eyes_valid but an eye box is absent")
            elif size is not None:
                for name, b in (("left", r.left_eye_box), ("right", r.right_eye_box)):
                    if not b.within(*size):
                        report.add(key, "eye_box_out_of_bounds",
                                   f"{name} eye box {b} exceeds image {size[0]}x{size[1]}")
        if r.eye_corners is not None and r.left_eye_box is not None and r.right_eye_box is not None:
            c = r.eye_corners
            for name, b, pts in (("left", r.left_eye_box, (c[0:2], c[2:4])),
                                 ("right", r.right_eye_box, (c[4:6], c[6:8]))):
                big = b.inflate(CORNER_SLACK)
                if not all(big.contains(*pt) for pt in pts):
                    report.add(key, "corner_outside_eye_box",
                               f"{name} eye corner outside the 25%-inflated eye box")
    return report

"""Synthetic GazeCapture-layout datasets with a known gaze-to-pixel mapping.

Each eye region is painted so that its red channel is linear in the gaze x
coordinate and its green channel linear in y, with a dark pupil displaced in
the gaze direction and a per-participant blue texture. The gaze point is
therefore an analytic function of the crop content, which lets the whole
pipeline be trained and checked on a laptop.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import Box, FrameRecord, GazePoint
from .splits import random_roster

X_RANGE = (-3.0, 3.0)
Y_RANGE = (1.0, 11.0)
EYE_HALF = 8.0   # half the corner-to-corner distance, px
PATCH_HALF = 18  # painted eye region, px; covers the 1.5x crop plus jitter


@dataclass
class SyntheticSpec:
    participants: int = 100
    dots_per_participant: int = 20
    frames_per_dot: int = 2
    width: int = 96
    height: int = 128
    jitter: float = 2.0
    noise: float = 2.0
    seed: int = 0
    device_models: tuple = ("iPhone 6",)
    orientations: tuple = ("portrait",)
    roster_proportions: tuple = (80, 10, 10)
    invalid_every: int = 0  # mark every n-th frame face-invalid (0 = never)


def gaze_code(x_cm, y_cm):
    """Gaze point normalized to [-1, 1]^2 over the synthetic screen."""
    u = (x_cm - sum(X_RANGE) / 2) / ((X_RANGE[1] - X_RANGE[0]) / 2)
    v = (y_cm - sum(Y_RANGE) / 2) / ((Y_RANGE[1] - Y_RANGE[0]) / 2)
    return u, v


def participant_dots(rng, n):
    xs = rng.uniform(*X_RANGE, size=n)
    ys = rng.uniform(*Y_RANGE, size=n)
    return np.round(np.stack([xs, ys], axis=1), 4)


def render_frame(rng, spec, gaze, texture):
    """RGB uint8 frame plus its 8 eye-corner coordinates and eye centers."""
    h, w = spec.height, spec.width
    img = 90.0 + rng.normal(0.0, 6.0, size=(h, w, 3))
    u, v = gaze_code(*gaze)
    dx, dy = rng.uniform(-spec.jitter, spec.jitter, size=2)
    centers = [(w * 0.65 + dx, h * 0.44 + dy), (w * 0.35 + dx, h * 0.44 + dy)]  # left, right eye
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for cx, cy in centers:
        r0, r1 = int(cy) - PATCH_HALF, int(cy) + PATCH_HALF
        c0, c1 = int(cx) - PATCH_HALF, int(cx) + PATCH_HALF
        img[r0:r1, c0:c1, 0] = 128.0 + 100.0 * u
        img[r0:r1, c0:c1, 1] = 128.0 + 100.0 * v
        img[r0:r1, c0:c1, 2] = texture[: r1 - r0, : c1 - c0]
        pupil = (xx - cx - 4.0 * u) ** 2 + (yy - cy - 4.0 * v) ** 2 <= 9.0
        img[pupil] *= 0.4
    img += rng.normal(0.0, spec.noise, size=img.shape)
    (lx, ly), (rx, ry) = centers
    # inner corners face the other eye
    corners = (lx - EYE_HALF, ly, lx + EYE_HALF, ly, rx + EYE_HALF, ry, rx - EYE_HALF, ry)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), corners, centers


def _face_and_eyes(spec, centers):
    face = Box(spec.width * 0.15, spec.height * 0.25, spec.width * 0.7, spec.height * 0.5)
    eyes = [Box(cx - 10.0, cy - 7.0, 20.0, 14.0) for cx, cy in centers]
    return face, eyes


def generate(spec):
    """Yield ``(participant_id, frames)`` where frames is a list of dicts with
    the rendered image and every sidecar field."""
    for p in range(spec.participants):
        pid = f"{p:05d}"
        rng = np.random.default_rng([spec.seed, p])
        texture = 128.0 + 20.0 * rng.standard_normal((2 * PATCH_HALF, 2 * PATCH_HALF))
        dots = participant_dots(rng, spec.dots_per_participant)
        device = spec.device_models[p % len(spec.device_models)]
        frames = []
        for d, gaze in enumerate(dots):
            for _ in range(spec.frames_per_dot):
                idx = len(frames)
                img, corners, centers = render_frame(rng, spec, gaze, texture)
                face, eyes = _face_and_eyes(spec, centers)
                valid = not (spec.invalid_every and (idx + 1) % spec.invalid_every == 0)
                frames.append({
                    "index": idx, "image": img, "gaze": (float(gaze[0]), float(gaze[1])),
                    "dot": d, "corners": [round(c, 3) for c in corners], "face": face,
                    "eyes": eyes, "face_valid": valid,
                    "orientation": spec.orientations[idx % len(spec.orientations)],
                    "device": device,
                })
        yield pid, frames


_ORIENT_CODE = {"portrait": 1, "portrait_upside_down": 2, "landscape_right": 3, "landscape_left": 4}


def write_dataset(root, spec=None):
    """Write a GazeCapture-style tree under ``root``; returns the roster."""
    from PIL import Image

    spec = spec or SyntheticSpec()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    roster = random_roster([f"{p:05d}" for p in range(spec.participants)], seed=spec.seed,
                           proportions=spec.roster_proportions)
    for pid, frames in generate(spec):
        d = root / pid
        (d / "frames").mkdir(parents=True, exist_ok=True)
        names = []
        for f in frames:
            name = f"{f['index']:05d}.png"
            Image.fromarray(f["image"]).save(d / "frames" / name, optimize=False, compress_level=1)
            names.append(name)
        face = {"X": [], "Y": [], "W": [], "H": [], "IsValid": []}
        eyes = [{"X": [], "Y": [], "W": [], "H": [], "IsValid": []} for _ in range(2)]
        for f in frames:
            fb = f["face"]
            for k, v in zip("XYWH", (fb.x, fb.y, fb.w, fb.h)):
                face[k].append(round(v, 3))
            face["IsValid"].append(int(f["face_valid"]))
            for side, eb in zip(eyes, f["eyes"]):
                # eye boxes are stored relative to the face box
                for k, v in zip("XYWH", (eb.x - fb.x, eb.y - fb.y, eb.w, eb.h)):
                    side[k].append(round(v, 3))
                side["IsValid"].append(int(f["face_valid"]))
        sidecars = {
            "frames.json": names,
            "appleFace.json": face,
            "appleLeftEye.json": eyes[0],
            "appleRightEye.json": eyes[1],
            "dotInfo.json": {"DotNum": [f["dot"] for f in frames],
                             "XCam": [f["gaze"][0] for f in frames],
                             "YCam": [f["gaze"][1] for f in frames]},
            "screen.json": {"Orientation": [_ORIENT_CODE[f["orientation"]] for f in frames]},
            "info.json": {"DeviceName": frames[0]["device"] if frames else spec.device_models[0],
                          "Dataset": roster[pid], "TotalFrames": len(frames)},
            "landmarks.json": [f["corners"] for f in frames],
        }
        for name, obj in sidecars.items():
            (d / name).write_text(json.dumps(obj), encoding="utf-8")
    return roster


def synthetic_records(participants=250, dots=20, frames_per_dot=2, seed=0,
                      device_models=("iPhone 6",), orientations=("portrait",)):
    """Image-less FrameRecords for split and filter tests."""
    rng = np.random.default_rng(seed)
    out = []
    for p in range(participants):
        pid = f"{p:05d}"
        pts = participant_dots(rng, dots)
        idx = 0
        for d in range(dots):
            for _ in range(frames_per_dot):
                out.append(FrameRecord(
                    participant_id=pid, frame_index=idx, image_path=f"{pid}/frames/{idx:05d}.png",
                    gaze=GazePoint(float(pts[d, 0]), float(pts[d, 1])), dot_id=d,
                    face_box=None, left_eye_box=None, right_eye_box=None, eye_corners=None,
                    device_model=device_models[p % len(device_models)],
                    orientation=orientations[idx % len(orientations)],
                    face_valid=True, eyes_valid=True))
                idx += 1
    return out

import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from gazekit.errors import GazeKitError, LengthMismatch, MalformedJson, MissingSidecar
from gazekit.ingest import (Box, FrameRecord, GazePoint, Manifest, build_manifest, dumps_manifest,
                            import_generic, load_manifest, loads_manifest, parse_participant,
                            save_manifest, validate)
from gazekit.synthetic import SyntheticSpec, write_dataset


def write_participant(root, pid, n=10, face_valid=None, device="iPhone 6", dataset="train",
                      orientation=1, image_size=(64, 48), landmarks=False):
    """Hand-built GazeCapture participant directory with ``n`` frames."""
    d = root / pid
    (d / "frames").mkdir(parents=True)
    face_valid = face_valid or [1] * n
    names = [f"{i:05d}.jpg" for i in range(n)]
    for name in names:
        Image.new("RGB", image_size, (10, 20, 30)).save(d / "frames" / name)
    sidecars = {
        "frames.json": names,
        "appleFace.json": {"X": [10.0] * n, "Y": [5.0] * n, "W": [40.0] * n, "H": [40.0] * n,
                           "IsValid": face_valid},
        "appleLeftEye.json": {"X": [4.0] * n, "Y": [8.0] * n, "W": [12.0] * n, "H": [12.0] * n,
                              "IsValid": face_valid},
        "appleRightEye.json": {"X": [24.0] * n, "Y": [8.0] * n, "W": [12.0] * n, "H": [12.0] * n,
                               "IsValid": face_valid},
        "dotInfo.json": {"DotNum": [i // 2 for i in range(n)], "XCam": [0.5 * i for i in range(n)],
                         "YCam": [-1.0 - i for i in range(n)]},
        "screen.json": {"Orientation": [orientation] * n},
        "info.json": {"DeviceName": device, "Dataset": dataset, "TotalFrames": n},
    }
    if landmarks:
        sidecars["landmarks.json"] = [[26.0, 19.0, 14.0, 19.0, 34.0, 19.0, 46.0, 19.0]] * n
    for name, obj in sidecars.items():
        (d / name).write_text(json.dumps(obj), encoding="utf-8")
    return d


def test_ten_frames_give_ten_records(tmp_path):
    write_participant(tmp_path, "00002")
    m = build_manifest(tmp_path)
    assert len(m) == 10 and m.participants() == ["00002"]
    r = m.records[3]
    assert r.key == "00002/00003" and r.image_path == "00002/frames/00003.jpg"
    assert r.gaze == GazePoint(1.5, -4.0) and r.dot_id == 1
    assert r.face_box == Box(10, 5, 40, 40)
    # eye boxes are stored relative to the face box
    assert r.left_eye_box == Box(14, 13, 12, 12) and r.right_eye_box == Box(34, 13, 12, 12)
    assert r.orientation == "portrait" and r.device_model == "iPhone 6" and r.image_size == (64, 48)
    assert m.roster == {"00002": "train"}


def test_invalid_face_propagates(tmp_path):
    flags = [1] * 10
    flags[4] = 0
    write_participant(tmp_path, "00002", face_valid=flags)
    r = build_manifest(tmp_path).records[4]
    assert not r.face_valid and not r.eyes_valid
    assert r.face_box is None and r.left_eye_box is None


@pytest.mark.parametrize("code, name", [(1, "portrait"), (2, "portrait_upside_down"),
                                        (3, "landscape_right"), (4, "landscape_left")])
def test_orientation_codes(tmp_path, code, name):
    write_participant(tmp_path, "p", n=2, orientation=code)
    assert build_manifest(tmp_path).records[0].orientation == name


def test_record_count_matches_independent_walk(tmp_path):
    write_dataset(tmp_path, SyntheticSpec(participants=4, dots_per_participant=5, frames_per_dot=2))
    m = build_manifest(tmp_path, workers=2)
    walked = sum(len(json.loads((d / "frames.json").read_text())) for d in tmp_path.iterdir())
    assert len(m) == walked == 40
    keys = [(r.participant_id, r.frame_index) for r in m]
    assert keys == sorted(keys)
    assert validate(m, tmp_path).ok


def test_missing_sidecar_names_file(tmp_path):
    d = write_participant(tmp_path, "00007")
    (d / "dotInfo.json").unlink()
    with pytest.raises(MissingSidecar, match="dotInfo.json") as info:
        build_manifest(tmp_path)
    assert "00007" in str(info.value)


def test_malformed_json_reports_byte_offset(tmp_path):
    d = write_participant(tmp_path, "00007")
    (d / "screen.json").write_bytes(b'{"Orientation": [1, 1,, 1]}')
    with pytest.raises(MalformedJson, match="byte 22"):
        parse_participant(d)


def test_length_mismatch(tmp_path):
    d = write_participant(tmp_path, "00007")
    dots = json.loads((d / "dotInfo.json").read_text())
    dots["XCam"].pop()
    (d / "dotInfo.json").write_text(json.dumps(dots))
    with pytest.raises(LengthMismatch, match="XCam has 9 entries"):
        parse_participant(d)


def test_empty_root_warns(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        m = build_manifest(tmp_path)
    assert len(m) == 0 and "no participant directories" in caplog.text
    with pytest.raises(GazeKitError, match="does not exist"):
        build_manifest(tmp_path / "nope")


GOLDEN = ('{"device_model":"iPhone 6","dot_id":0,"eye_corners":null,"eyes_valid":true,'
          '"face_box":[10.0,5.0,40.0,40.0],"face_valid":true,"frame_index":0,"gaze":[0.0,-1.0],'
          '"image_path":"00002/frames/00000.jpg","image_size":[64,48],'
          '"left_eye_box":[14.0,13.0,12.0,12.0],"orientation":"portrait","participant_id":"00002",'
          '"right_eye_box":[34.0,13.0,12.0,12.0]}')


def test_golden_manifest_bytes(tmp_path):
    write_participant(tmp_path, "00002", n=2)
    lines = dumps_manifest(build_manifest(tmp_path)).splitlines()
    header = json.loads(lines[0])["manifest"]
    assert header["schema_version"] == 1 and header["roster"] == {"00002": "train"}
    assert lines[1] == GOLDEN
    assert len(lines) == 3


def test_manifest_roundtrip(tmp_path):
    write_dataset(tmp_path / "data", SyntheticSpec(participants=3, dots_per_participant=3, frames_per_dot=2))
    m = build_manifest(tmp_path / "data")
    save_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert back.records == m.records and back.roster == m.roster and back.source_root == m.source_root
    assert dumps_manifest(back) == dumps_manifest(m)


def test_manifest_parse_errors_name_line():
    with pytest.raises(MalformedJson, match=":2:"):
        loads_manifest('{"manifest": {}}\n{not json}\n')


def test_landmarks_used_and_fallback(tmp_path):
    write_participant(tmp_path, "a", n=2, landmarks=True)
    write_participant(tmp_path, "b", n=2)
    m = build_manifest(tmp_path)
    a, b = m.records[0], m.records[2]
    assert a.corners() == (26.0, 19.0, 14.0, 19.0, 34.0, 19.0, 46.0, 19.0)
    # fallback: midline endpoints of each eye box, inner end facing the other eye
    assert b.eye_corners is None
    assert b.corners() == (26.0, 19.0, 14.0, 19.0, 34.0, 19.0, 46.0, 19.0)


def test_generic_import(tmp_path):
    rec = json.loads(GOLDEN)
    rec2 = dict(rec, frame_index=1, participant_id="00001")
    (tmp_path / "data.json").write_text(json.dumps([rec, rec2]))
    m = import_generic(tmp_path / "data.json")
    assert [r.key for r in m] == ["00001/00001", "00002/00000"]
    with pytest.raises(MalformedJson):
        (tmp_path / "bad.json").write_text(json.dumps([{"gaze": [0, 0]}]))
        import_generic(tmp_path / "bad.json")


# --- validation --------------------------------------------------------------------------

def test_validate_clean_and_out_of_bounds(tmp_path):
    write_participant(tmp_path, "00002", n=3)
    m = build_manifest(tmp_path)
    assert validate(m).ok
    bad = m.records[1]
    moved = FrameRecord(**{**bad.__dict__, "right_eye_box": Box(60, 13, 12, 12)})
    rep = validate(m.subset([m.records[0], moved, m.records[2]]))
    assert [v["kind"] for v in rep.violations] == ["eye_box_out_of_bounds"]
    assert rep.violations[0]["key"] == "00002/00001"


def test_validate_paths_duplicates_order(tmp_path):
    write_participant(tmp_path, "00002", n=3)
    m = build_manifest(tmp_path)
    (tmp_path / "00002" / "frames" / "00002.jpg").unlink()
    rep = validate(m.subset([m.records[1], m.records[0], m.records[0], m.records[2]]))
    kinds = sorted(v["kind"] for v in rep.violations)
    assert kinds == ["duplicate_key", "ordering", "unresolvable_path"]


def _brute_force(records, size):
    """Independent recomputation of the eye-box and corner checks."""
    out = set()
    w, h = size
    for r in records:
        boxes = {"left": r.left_eye_box, "right": r.right_eye_box}
        if r.eyes_valid:
            if None in boxes.values():
                out.add((r.key, "missing_eye_box"))
                continue
            for b in boxes.values():
                if b.x < 0 or b.y < 0 or b.x + b.w > w or b.y + b.h > h:
                    out.add((r.key, "eye_box_out_of_bounds"))
        if r.eye_corners is not None and None not in boxes.values():
            pts = np.array(r.eye_corners).reshape(4, 2)
            for (name, b), pair in zip(boxes.items(), (pts[:2], pts[2:])):
                lo = np.array([b.x - b.w * 0.125, b.y - b.h * 0.125])
                hi = np.array([b.x + b.w * 1.125, b.y + b.h * 1.125])
                if np.any(pair < lo) or np.any(pair > hi):
                    out.add((r.key, "corner_outside_eye_box"))
    return out


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_validation_fuzz_against_brute_force(seed):
    r = np.random.default_rng(seed)
    size = (100, 80)
    recs = []
    for i in range(1000):
        boxes = [Box(*r.uniform([-5, -5, 5, 5], [95, 75, 25, 25])) for _ in range(2)]
        if r.random() < 0.05:
            boxes[r.integers(2)] = None
        corners = None
        if r.random() < 0.7:
            corners = tuple(float(v) for v in r.uniform(-10, 110, 8))
        recs.append(FrameRecord("p", i, f"p/frames/{i:05d}.jpg", GazePoint(0.0, 0.0), 0, None,
                                boxes[0], boxes[1], corners, "iPhone 6", "portrait", True,
                                bool(r.random() < 0.9), image_size=size))
    rep = validate(Manifest(recs), check_paths=False)
    assert rep.records_checked == 1000
    got = {(v["key"], v["kind"]) for v in rep.violations}
    assert got == _brute_force(recs, size)

"""Frame filters plus per-participant (MIT) and per-dot (Google) splits."""
from __future__ import annotations

import json
import logging
import math
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleSplit, UnassignedParticipant, UnknownDeviceModel

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
# frame totals of the reference GazeCapture per-dot partition, normalized
GOOGLE_RATIOS = (0.731, 0.102, 0.167)
# participant counts of the reference GazeCapture per-participant partition
MIT_PROPORTIONS = (1081, 45, 121)
PHONE_PREFIXES = ("iphone",)
NON_PHONE_PREFIXES = ("ipad", "ipod")
_ALIASES = {"train": "train", "val": "validation", "validation": "validation", "test": "test"}


@dataclass(frozen=True)
class FilterSpec:
    require_face_valid: bool = False
    require_eyes_valid: bool = False
    mobile_only: bool = False
    portrait_only: bool = False
    phone_allow: tuple = PHONE_PREFIXES
    deny: tuple = NON_PHONE_PREFIXES

    @classmethod
    def standard(cls):
        return cls(require_face_valid=True, require_eyes_valid=True, mobile_only=True, portrait_only=True)

    def device_class(self, model):
        name = model.strip().lower()
        if any(name.startswith(p.lower()) for p in self.phone_allow):
            return "phone"
        if any(name.startswith(p.lower()) for p in self.deny):
            return "other"
        return "unknown"


def apply_filters(manifest, spec, on_unknown=None):
    """Records passing every enabled predicate, in their original order.

    With ``mobile_only`` a device model in neither list raises
    :class:`UnknownDeviceModel` internally; the record is dropped and the error
    handed to ``on_unknown`` (default: one warning per model).
    """
    warned = set()

    def report(exc, model):
        if on_unknown is not None:
            on_unknown(exc)
        elif model not in warned:
            log.warning("%s", exc)
        warned.add(model)

    kept = []
    for r in manifest.records:
        if spec.require_face_valid and not r.face_valid:
            continue
        if spec.require_eyes_valid and not r.eyes_valid:
            continue
        if spec.portrait_only and r.orientation != "portrait":
            continue
        if spec.mobile_only:
            cls = spec.device_class(r.device_model)
            if cls == "unknown":
                report(UnknownDeviceModel(f"{r.key}: device model {r.device_model!r} is in neither "
                                          f"the phone allow-list nor the deny-list"), r.device_model)
                continue
            if cls != "phone":
                continue
        kept.append(r)
    return manifest.subset(kept)


def largest_remainder(total, weights):
    """Integer parts of ``total`` proportional to ``weights``; leftovers go to
    the largest fractional parts, earlier entries winning ties."""
    w = np.asarray(weights, dtype=np.float64)
    quotas = total * w / w.sum()
    base = np.floor(quotas).astype(int)
    frac = quotas - base
    order = sorted(range(len(w)), key=lambda i: (-frac[i], i))
    for i in order[: total - int(base.sum())]:
        base[i] += 1
    return [int(v) for v in base]


@dataclass
class SplitAssignment:
    strategy: str
    seed: int
    assignment: dict                 # frame key -> split
    participants: dict = field(default_factory=dict, repr=False)   # frame key -> participant
    ratios: tuple = None
    notes: list = field(default_factory=list)

    @property
    def counts(self):
        out = {s: {"participants": 0, "frames": 0} for s in SPLITS}
        people = defaultdict(set)
        for key, split in self.assignment.items():
            out[split]["frames"] += 1
            people[split].add(self.participants.get(key, key.split("/")[0]))
        for s in SPLITS:
            out[s]["participants"] = len(people[s])
        return out

    def keys(self, split):
        return [k for k, s in self.assignment.items() if s == split]

    def participant_sets(self):
        sets = {s: set() for s in SPLITS}
        for key, split in self.assignment.items():
            sets[split].add(self.participants.get(key, key.split("/")[0]))
        return sets

    def to_dict(self):
        return {"strategy": self.strategy, "seed": self.seed,
                "ratios": None if self.ratios is None else list(self.ratios),
                "counts": self.counts, "notes": list(self.notes),
                "assignment": dict(self.assignment),
                "participants": dict(self.participants)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(strategy=d["strategy"], seed=int(d["seed"]), assignment=dict(d["assignment"]),
                   participants=dict(d.get("participants", {})),
                   ratios=None if d.get("ratios") is None else tuple(d["ratios"]),
                   notes=list(d.get("notes", [])))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise InfeasibleSplit(f"seed must be a non-negative 64-bit integer, got {seed}")
    return seed


def random_roster(participants, seed=0, proportions=MIT_PROPORTIONS):
    """Seeded participant -> split map with the given relative sizes.

    Every split gets at least one participant when there are three or more.
    """
    seed = _check_seed(seed)
    people = sorted(participants)
    counts = largest_remainder(len(people), proportions)
    if len(people) >= len(SPLITS):
        for i in range(len(counts)):
            if counts[i] == 0:
                counts[int(np.argmax(counts))] -= 1
                counts[i] = 1
    order = np.random.default_rng(seed).permutation(len(people))
    roster = {}
    pos = 0
    for split, c in zip(SPLITS, counts):
        for j in order[pos:pos + c]:
            roster[people[j]] = split
        pos += c
    return roster


def mit_split(manifest, roster, seed=0):
    """Each frame inherits its participant's split."""
    seed = _check_seed(seed)
    norm = {}
    for pid, label in roster.items():
        split = _ALIASES.get(str(label).lower())
        if split is None:
            raise InfeasibleSplit(f"roster entry {pid}: unknown split label {label!r}")
        norm[str(pid)] = split
    missing = sorted({r.participant_id for r in manifest.records} - norm.keys())
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise UnassignedParticipant(f"{len(missing)} participant(s) absent from roster: {shown}")
    assignment = {r.key: norm[r.participant_id] for r in manifest.records}
    return SplitAssignment("mit", seed, assignment,
                           participants={r.key: r.participant_id for r in manifest.records})


def google_split(manifest, ratios=GOOGLE_RATIOS, seed=0, on_too_few=None):
    """Partition each participant's distinct dots by ``ratios``.

    Each participant's dots are shuffled by a generator seeded with
    ``(seed, crc32(participant_id))`` so one participant's partition does not
    depend on who else is in the manifest. A participant with fewer than three
    dots goes wholly to train and is listed in ``notes``.
    """
    seed = _check_seed(seed)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not math.isfinite(r) or r <= 0 for r in ratios):
        raise InfeasibleSplit(f"ratios must be three positive fractions, got {ratios}")
    if abs(math.fsum(ratios) - 1.0) > 1e-9:
        raise InfeasibleSplit(f"ratios must sum to 1 within 1e-9, got {math.fsum(ratios)!r}")
    dots = defaultdict(set)
    for r in manifest.records:
        dots[r.participant_id].add(r.dot_id)
    dot_split = {}
    notes = []
    for pid in sorted(dots):
        ids = sorted(dots[pid])
        if len(ids) < 3:
            msg = f"TooFewDots: participant {pid} has {len(ids)} distinct dot(s); assigned to train only"
            notes.append(msg)
            if on_too_few:
                on_too_few(msg)
            for d in ids:
                dot_split[(pid, d)] = "train"
            continue
        rng = np.random.default_rng([seed, zlib.crc32(pid.encode("utf-8"))])
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        counts = largest_remainder(len(ids), ratios)
        pos = 0
        for split, c in zip(SPLITS, counts):
            for d in shuffled[pos:pos + c]:
                dot_split[(pid, d)] = split
            pos += c
    assignment = {r.key: dot_split[(r.participant_id, r.dot_id)] for r in manifest.records}
    return SplitAssignment("google", seed, assignment,
                           participants={r.key: r.participant_id for r in manifest.records},
                           ratios=ratios, notes=notes)


@dataclass
class StatsReport:
    strategy: str
    seed: int
    splits: dict

    def to_dict(self):
        return {"strategy": self.strategy, "seed": self.seed, "splits": self.splits}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_text(self):
        lines = [f"# strategy={self.strategy} seed={self.seed}",
                 f"{'split':<11} {'participants':>12} {'frames':>9}"]
        for s in SPLITS:
            d = self.splits[s]
            lines.append(f"{s:<11} {d['participants']:>12,d} {d['frames']:>9,d}")
        total_p = sum(self.splits[s]["participants"] for s in SPLITS)
        total_f = sum(self.splits[s]["frames"] for s in SPLITS)
        lines.append(f"{'total':<11} {total_p:>12,d} {total_f:>9,d}")
        models = sorted({m for s in SPLITS for m in self.splits[s]["devices"]})
        if models:
            w = max(len(m) for m in models)
            lines.append("")
            lines.append(f"{'device':<{w}} " + " ".join(f"{s:>10}" for s in SPLITS))
            for m in models:
                lines.append(f"{m:<{w}} " + " ".join(
                    f"{self.splits[s]['devices'].get(m, 0):>10,d}" for s in SPLITS))
        return "\n".join(lines) + "\n"


def split_stats(assignment, manifest):
    """Participants, frames and per-device frame histogram of each split."""
    people = defaultdict(set)
    frames = Counter()
    devices = {s: Counter() for s in SPLITS}
    for r in manifest.records:
        split = assignment.assignment.get(r.key)
        if split is None:
            continue
        people[split].add(r.participant_id)
        frames[split] += 1
        devices[split][r.device_model] += 1
    splits = {s: {"participants": len(people[s]), "frames": frames[s],
                  "devices": dict(sorted(devices[s].items()))} for s in SPLITS}
    return StatsReport(assignment.strategy, assignment.seed, splits)

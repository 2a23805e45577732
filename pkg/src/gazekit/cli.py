"""``gazekit`` command line: ingest, split, train, eval, personalize, viz, synth.

Exit codes: 0 success, 1 operational error, 2 validation failure (``--strict``).
Flags override the ``--config`` file; ``GAZEKIT_DATA`` overrides its
``dataset_root``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .config import ENV_DATA, load_config
from .errors import EmptyEvalSet, GazeKitError
from .evalviz import ScatterScene, build_report, export_csv, per_frame_errors, render_scatter
from .ingest import build_manifest, import_generic, load_manifest, save_manifest, validate
from .splits import (FilterSpec, SplitAssignment, apply_filters, google_split, mit_split,
                     random_roster, split_stats)

EXIT_OK, EXIT_ERROR, EXIT_INVALID = 0, 1, 2
log = logging.getLogger("gazekit")


class _Parser(argparse.ArgumentParser):
    """Bad or unknown flags exit 1 rather than argparse's default 2, which is
    reserved for validation failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# helpers


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _workers(args, cfg):
    return args.workers if args.workers else cfg.resolved_workers()


def _root(args, cfg, manifest=None):
    root = getattr(args, "root", None) or os.environ.get(ENV_DATA) or cfg.dataset_root
    if not root and manifest is not None:
        root = manifest.source_root
    return root


def _parse_ratios(text):
    try:
        parts = [float(Fraction(p.strip())) for p in text.split(",")]
    except (ValueError, ZeroDivisionError):
        raise GazeKitError(f"cannot parse ratios {text!r}; expected e.g. 0.731,0.102,0.167") from None
    return tuple(parts)


def _preprocess(records, root, crop_size, workers):
    from .gazenet.preprocess import preprocess_records

    records = list(records)
    if workers <= 1 or len(records) < 64:
        return preprocess_records(records, root, crop_size=crop_size)
    chunks = [records[i::workers] for i in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: preprocess_records(c, root, crop_size=crop_size), chunks))
    # undo the round-robin interleave so arrays follow record order
    pos = {r.key: i for i, r in enumerate(records)}
    keys = [k for arrays, _ in parts for k in arrays["keys"]]
    order = np.argsort([pos[k] for k in keys], kind="stable")
    merged = {}
    for name in ("left", "right", "corners", "targets"):
        merged[name] = np.concatenate([a[name] for a, _ in parts])[order]
    merged["keys"] = [keys[i] for i in order]
    skipped = sorted((s for _, sk in parts for s in sk), key=lambda s: pos[s[0]])
    return merged, skipped


def _load_split(path):
    p = Path(path)
    if not p.is_file():
        raise GazeKitError(f"split file not found: {p}")
    try:
        return SplitAssignment.load(p)
    except (json.JSONDecodeError, KeyError) as exc:
        raise GazeKitError(f"{p}: not a split assignment ({exc})") from exc


def _subset(manifest, assignment, split):
    return [r for r in manifest.records if assignment.assignment.get(r.key) == split]


FEATURES_HEADER = "features"


def _write_features(path, rows, meta):
    lines = [json.dumps({FEATURES_HEADER: meta}, sort_keys=True)]
    for r in rows:
        lines.append(json.dumps({
            "key": r.key, "participant_id": r.participant_id, "dot_id": r.dot_id,
            "penultimate": [float(v) for v in r.penultimate],
            "base_pred": [float(v) for v in r.base_pred],
            "truth": [float(v) for v in r.truth],
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_features(path):
    """``(meta, rows)`` from a features file written by ``gazekit eval``."""
    from .gazenet.training import FeatureRow

    p = Path(path)
    if not p.is_file():
        raise GazeKitError(f"features file not found: {p}")
    meta, rows = {}, []
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GazeKitError(f"{p}:{lineno}: invalid JSON: {exc.msg}") from exc
        if FEATURES_HEADER in obj:
            meta = obj[FEATURES_HEADER]
            continue
        rows.append(FeatureRow(key=obj["key"], participant_id=obj["participant_id"],
                               dot_id=obj["dot_id"],
                               penultimate=np.asarray(obj["penultimate"], dtype=np.float64),
                               base_pred=np.asarray(obj["base_pred"], dtype=np.float64),
                               truth=np.asarray(obj["truth"], dtype=np.float64)))
    return meta, rows


def _users(rows):
    from .personalize import UserData

    groups = OrderedDict()
    for r in rows:
        groups.setdefault(r.participant_id, []).append(r)
    return [UserData.from_rows(pid, rs) for pid, rs in groups.items()]


def _calibration_mask(rows):
    """Frames on each user's 13 peripheral dots; users with fewer dots mark none."""
    from .personalize import peripheral_dots
    from .personalize.calibration import CALIBRATION_DOTS

    mask = np.zeros(len(rows), dtype=bool)
    by_user = OrderedDict()
    for i, r in enumerate(rows):
        by_user.setdefault(r.participant_id, []).append(i)
    for idx in by_user.values():
        dots = [rows[i].dot_id for i in idx]
        if len(set(dots)) < CALIBRATION_DOTS:
            continue
        cal = set(peripheral_dots(dots, np.array([rows[i].truth for i in idx])))
        for i in idx:
            mask[i] = rows[i].dot_id in cal
    return mask


# ----------------------------------------------------------------------------
# commands


def cmd_ingest(args, cfg):
    root = _root(args, cfg)
    if args.generic:
        manifest = import_generic(args.generic, source_root=root)
    else:
        if not root:
            raise GazeKitError(f"no dataset root: pass --root, set {ENV_DATA} or dataset_root in the config")
        if not Path(root).is_dir():
            raise GazeKitError(f"dataset root does not exist: {root}")
        manifest = build_manifest(root, workers=_workers(args, cfg))
    out = _out_dir(args.out)
    save_manifest(manifest, out / "manifest.jsonl")
    report = validate(manifest, root=root or None, check_paths=not args.no_path_check)
    _write_json(out / "validation.json", report.to_dict())
    print(f"{len(manifest)} records from {len(manifest.participants())} participants; "
          f"{len(report.violations)} violation(s)")
    for v in report.violations[:20]:
        print(f"  {v['kind']}: {v['key']}: {v['message']}", file=sys.stderr)
    if args.strict and not report.ok:
        return EXIT_INVALID
    return EXIT_OK


def cmd_split(args, cfg):
    manifest = load_manifest(args.manifest or cfg.manifest_path)
    spec = FilterSpec() if args.no_filters else cfg.filters
    unknown = []
    filtered = apply_filters(manifest, spec, on_unknown=unknown.append)
    if unknown:
        models = sorted({r.device_model for r in manifest if spec.device_class(r.device_model) == "unknown"})
        print(f"excluded {len(unknown)} frame(s) with unknown device models: {', '.join(models)}",
              file=sys.stderr)
    strategy = args.strategy or cfg.split.strategy
    seed = cfg.split.seed if args.seed is None else args.seed
    if strategy == "mit":
        if args.roster:
            roster = json.loads(Path(args.roster).read_text(encoding="utf-8"))
        else:
            roster = manifest.roster
        if not roster:
            log.warning("manifest carries no roster; drawing a seeded random one")
            roster = random_roster(filtered.participants(), seed=seed)
        assignment = mit_split(filtered, roster, seed=seed)
    else:
        ratios = _parse_ratios(args.ratios) if args.ratios else cfg.split.ratios
        assignment = google_split(filtered, ratios=ratios, seed=seed)
        for note in assignment.notes:
            print(note, file=sys.stderr)
    stats = split_stats(assignment, filtered)
    out = _out_dir(args.out)
    assignment.save(out / "split.json")
    (out / "stats.json").write_text(stats.to_json(), encoding="utf-8")
    (out / "stats.txt").write_text(stats.to_text(), encoding="utf-8")
    print(stats.to_text(), end="")
    return EXIT_OK


def cmd_train(args, cfg):
    from .gazenet import checkpoint as ck
    from .gazenet.training import evaluate_network, train

    manifest = load_manifest(args.manifest or cfg.manifest_path)
    assignment = _load_split(args.split)
    root = _root(args, cfg, manifest)
    resume = ck.load(args.resume) if args.resume else None
    gcfg = resume.config if resume is not None else cfg.gazenet
    overrides = {k: v for k, v in (("max_steps", args.max_steps), ("seed", args.seed)) if v is not None}
    if overrides:
        gcfg = replace(gcfg, **overrides)
        if resume is not None:
            resume.meta["config"] = gcfg.to_dict()
    workers = _workers(args, cfg)
    train_data, skipped = _preprocess(_subset(manifest, assignment, "train"), root, gcfg.crop_size, workers)
    val_data, vskipped = _preprocess(_subset(manifest, assignment, "validation"), root, gcfg.crop_size, workers)
    if skipped or vskipped:
        print(f"skipped {len(skipped) + len(vskipped)} frame(s) during preprocessing", file=sys.stderr)
    out = _out_dir(args.out)
    result = train(train_data, gcfg, val_data=val_data, resume=resume)
    ck.save(result.best, out / "checkpoint.gztk")
    ck.save(result.last, out / "last.gztk")
    with open(out / "train_log.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "train_loss", "train_med", "val_med"])
        for row in result.history:
            w.writerow([row["step"], f"{row['lr']:.9g}", f"{row['train_loss']:.9g}",
                        f"{row['train_med']:.9g}",
                        "" if row["val_med"] is None else f"{row['val_med']:.9g}"])
    final_train, _ = evaluate_network(ck.to_network(result.last), train_data)
    summary = {"seed": gcfg.seed, "steps": result.last.step, "best_step": result.best_step,
               "best_val_med_cm": None if math.isnan(result.best_val_med) else result.best_val_med,
               "final_train_med_cm": final_train, "train_frames": len(train_data["keys"]),
               "val_frames": len(val_data["keys"])}
    _write_json(out / "train_summary.json", summary)
    if args.png and result.history:
        from .plotting import plot_training

        plot_training(result.history, out / "training.png")
    best = "NA" if summary["best_val_med_cm"] is None else f"{summary['best_val_med_cm']:.4f}"
    print(f"step {summary['steps']} seed {gcfg.seed}: train MED {final_train:.4f} cm, "
          f"best val MED {best} cm at step {result.best_step}")
    return EXIT_OK


def cmd_eval(args, cfg):
    from .gazenet import checkpoint as ck
    from .gazenet.training import extract_features

    ckpt = ck.load(args.checkpoint)
    manifest = load_manifest(args.manifest or cfg.manifest_path)
    assignment = _load_split(args.split)
    records = _subset(manifest, assignment, args.subset)
    if not records:
        raise EmptyEvalSet(f"no frames assigned to split {args.subset!r}")
    root = _root(args, cfg, manifest)
    data, skipped = _preprocess(records, root, ckpt.config.crop_size, _workers(args, cfg))
    if not data["keys"]:
        raise EmptyEvalSet(f"none of the {len(records)} {args.subset} frames could be preprocessed")
    by_key = manifest.by_key()
    rows = extract_features(ckpt, by_key, data)
    out = _out_dir(args.out)
    meta = {"checkpoint_step": ckpt.step, "seed": ckpt.config.seed, "strategy": assignment.strategy,
            "split_seed": assignment.seed, "subset": args.subset}
    _write_features(out / "features.jsonl", rows, meta)
    errors = per_frame_errors(np.array([r.base_pred for r in rows]), np.array([r.truth for r in rows]))
    groups = {
        "split": [args.subset] * len(rows),
        "device": [by_key[r.key].device_model for r in rows],
        "user": [r.participant_id for r in rows],
    }
    report = build_report(errors, groups, calibration=_calibration_mask(rows),
                          label=f"{assignment.strategy}/{args.subset}")
    _write_json(out / "report.json", {**meta, "skipped": len(skipped), "report": report.to_dict()})
    text = f"# strategy={assignment.strategy} subset={args.subset} seed={ckpt.config.seed}\n" + report.to_text()
    (out / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_personalize(args, cfg):
    from .personalize import CalibrationSplitSpec, run_personalization, select_users

    meta, rows = read_features(args.features)
    if not rows:
        raise EmptyEvalSet(f"{args.features} holds no frames")
    pc = cfg.personalize
    method = args.method or pc.method
    seed = pc.seed if args.seed is None else args.seed
    folds = args.folds or pc.folds
    variants = args.variants.split(",") if args.variants else list(pc.variants)
    try:
        specs = [CalibrationSplitSpec.parse(v, seed=seed) for v in variants]
    except ValueError as exc:
        raise GazeKitError(str(exc)) from exc
    top = pc.top_users if args.top is None else args.top
    users = select_users(_users(rows), top=top)

    def skipped(uid, variant, exc):
        print(f"skipped user {uid} under {variant}: {exc}", file=sys.stderr)

    summary = run_personalization(users, method=method, variants=specs, seed=seed, folds=folds,
                                  workers=_workers(args, cfg), base_split=meta.get("strategy", ""),
                                  on_error=skipped)
    out = _out_dir(args.out)
    (out / "personalization.json").write_text(summary.to_json(), encoding="utf-8")
    (out / "personalization.txt").write_text(summary.to_text(), encoding="utf-8")
    with open(out / "corrected.jsonl", "w", encoding="utf-8") as fh:
        for r in summary.reports:
            for key, p in zip(r.eval_keys, np.asarray(r.eval_corrected).tolist()):
                fh.write(json.dumps({"key": key, "variant": r.variant, "corrected": p}, sort_keys=True) + "\n")
    if args.png and summary.reports:
        from .plotting import plot_personalization

        for v in summary.variants:
            safe = v.replace("/", "_").replace(":", "_")
            plot_personalization(summary, out / f"personalization_{safe}.png", variant=v)
    print(summary.to_text(), end="")
    return EXIT_OK


def cmd_viz(args, cfg):
    _, rows = read_features(args.features)
    if not rows:
        raise EmptyEvalSet(f"{args.features} holds no frames")
    corrected = {}
    if args.corrected:
        for line in Path(args.corrected).read_text(encoding="utf-8").splitlines():
            if line.strip():
                obj = json.loads(line)
                if args.variant is None:
                    args.variant = obj["variant"]
                if obj["variant"] == args.variant:
                    corrected[obj["key"]] = obj["corrected"]
    out = _out_dir(args.out)
    export_csv(((r.key, r.truth, r.base_pred, corrected.get(r.key)) for r in rows), out / "frames.csv")
    users = OrderedDict()
    for r in rows:
        users.setdefault(r.participant_id, []).append(r)
    wanted = args.user or list(users)
    written = 0
    for uid in wanted:
        if uid not in users:
            raise GazeKitError(f"user {uid!r} not in {args.features}")
        rs = users[uid]
        pers = None
        evaluated = [r for r in rs if r.key in corrected]
        if evaluated:
            # corrections exist only for the user's evaluation frames
            rs = evaluated
            pers = np.array([corrected[r.key] for r in rs])
        scene = ScatterScene(truth=np.array([r.truth for r in rs]), preds=np.array([r.base_pred for r in rs]),
                             dot_ids=[r.dot_id for r in rs], corrected=pers, title=f"user {uid}")
        (out / f"scatter_{uid}.svg").write_text(render_scatter(scene), encoding="utf-8")
        if args.png:
            from .plotting import plot_scatter

            plot_scatter(scene, out / f"scatter_{uid}.png")
        written += 1
    print(f"wrote {written} scatter plot(s) and frames.csv ({len(rows)} frames) to {out}")
    return EXIT_OK


def cmd_synth(args, cfg):
    from .synthetic import SyntheticSpec, write_dataset

    spec = SyntheticSpec(participants=args.participants, dots_per_participant=args.dots,
                         frames_per_dot=args.frames_per_dot, seed=args.seed)
    write_dataset(args.out, spec)
    print(f"wrote {spec.participants} participants x {spec.dots_per_participant * spec.frames_per_dot} "
          f"frames under {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML pipeline config (flags override it)")
    common.add_argument("--workers", type=int, default=None,
                        help="parallel workers (default: config value, else all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="gazekit", description="Two-tower gaze estimation with per-user calibration.")
    p.add_argument("--version", action="version", version=f"gazekit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("ingest", parents=[common], help="build and validate a manifest")
    s.add_argument("--root", help=f"dataset root (default: ${ENV_DATA} or config dataset_root)")
    s.add_argument("--out", required=True, help="output directory for manifest.jsonl and validation.json")
    s.add_argument("--generic", metavar="JSON", help="import a generic JSON list of records instead")
    s.add_argument("--strict", action="store_true", help="exit 2 when validation finds violations")
    s.add_argument("--no-path-check", action="store_true", help="skip image path resolution checks")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("split", parents=[common], help="filter frames and assign train/validation/test")
    s.add_argument("--manifest", help="manifest.jsonl (default: config manifest_path)")
    s.add_argument("--strategy", choices=("mit", "google"), help="per-participant or per-dot split")
    s.add_argument("--seed", type=int, help="split seed (default: config, else 0)")
    s.add_argument("--ratios", help="google split fractions, e.g. 0.731,0.102,0.167 or 2/3,1/6,1/6")
    s.add_argument("--roster", help="JSON participant->split map for the mit strategy")
    s.add_argument("--no-filters", action="store_true", help="disable the frame filters")
    s.add_argument("--out", required=True, help="output directory for split.json and stats")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", parents=[common], help="train the gaze network")
    s.add_argument("--manifest", help="manifest.jsonl")
    s.add_argument("--split", required=True, help="split.json from the split command")
    s.add_argument("--root", help="dataset root holding the images (default: manifest source_root)")
    s.add_argument("--resume", metavar="CKPT", help="continue training from a checkpoint (last.gztk)")
    s.add_argument("--max-steps", type=int, help="override gazenet.max_steps")
    s.add_argument("--seed", type=int, help="override gazenet.seed")
    s.add_argument("--png", action="store_true", help="also draw training.png")
    s.add_argument("--out", required=True, help="output directory for checkpoints and train_log.csv")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint and export penultimate features")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--manifest", help="manifest.jsonl")
    s.add_argument("--split", required=True, help="split.json")
    s.add_argument("--subset", default="test", choices=("train", "validation", "test"),
                   help="which split to evaluate (default: test)")
    s.add_argument("--root", help="dataset root holding the images")
    s.add_argument("--out", required=True, help="output directory for features.jsonl and report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("personalize", parents=[common], help="per-user SVR or similarity correction")
    s.add_argument("--features", required=True, help="features.jsonl from the eval command")
    s.add_argument("--method", choices=("svr", "affine"), help="correction model (default: config, else svr)")
    s.add_argument("--variants", help="comma list of 0.7:shuffle, 2/3:shuffle, 0.7:noshuffle, unique, cal13")
    s.add_argument("--seed", type=int, help="calibration split seed")
    s.add_argument("--folds", type=int, choices=(3, 5), help="cross-validation folds for the epsilon search")
    s.add_argument("--top", type=int, help="only the N users with most frames (0 = all; default 10)")
    s.add_argument("--png", action="store_true", help="also draw per-user bar charts")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_personalize)

    s = sub.add_parser("viz", parents=[common], help="scatter plots (SVG) and per-frame CSV")
    s.add_argument("--features", required=True, help="features.jsonl from the eval command")
    s.add_argument("--corrected", help="corrected.jsonl from the personalize command")
    s.add_argument("--variant", help="which personalization variant to draw (default: first)")
    s.add_argument("--user", action="append", help="user to plot (repeatable; default: all)")
    s.add_argument("--png", action="store_true", help="also draw matplotlib PNGs")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_viz)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset in GazeCapture layout")
    s.add_argument("--out", required=True, help="dataset root to create")
    s.add_argument("--participants", type=int, default=100)
    s.add_argument("--dots", type=int, default=20, help="distinct dots per participant")
    s.add_argument("--frames-per-dot", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except GazeKitError as exc:
        print(f"gazekit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, json.JSONDecodeError) as exc:
        print(f"gazekit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())

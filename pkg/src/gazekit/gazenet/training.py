"""Minibatch Adam training, evaluation and penultimate-feature extraction."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .. import numerics as nx
from ..errors import EmptyEvalSet, EmptySplit, NumericFault
from ..evalviz import med, per_frame_errors
from . import checkpoint as ck
from .model import GazeNet

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    best: ck.Checkpoint
    last: ck.Checkpoint
    history: list = field(default_factory=list)
    best_step: int = 0
    best_val_med: float = float("nan")


def _epoch_order(n, seed, epoch):
    return np.random.default_rng([seed, epoch]).permutation(n)


def _batch(data, idx):
    return data["left"][idx], data["right"][idx], data["corners"][idx], data["targets"][idx]


def evaluate_network(net, data, batch_size=256):
    """MED (cm) and per-frame Euclidean errors of ``net`` on ``data``."""
    if len(data["targets"]) == 0:
        raise EmptyEvalSet("evaluation set is empty")
    pred, _ = net.predict(data["left"], data["right"], data["corners"], batch_size=batch_size)
    return med(pred, data["targets"]), per_frame_errors(pred, data["targets"])


def train(train_data, config, val_data=None, resume=None, on_log=None):
    """Fit a :class:`GazeNet` on ``train_data`` (dict of stacked arrays).

    ``resume`` is a checkpoint holding the latest training state; its step
    counter, Adam moments and schedule state are continued so that an
    interrupted run replays the uninterrupted one exactly. Returns the
    best-validation-MED checkpoint (earliest step on ties) alongside the last.
    """
    n = len(train_data["targets"])
    if n < 2:
        raise EmptySplit(f"training split has {n} usable frames; need at least 2")
    if resume is not None:
        net = ck.to_network(resume)
        schedule = ck.restore_schedule(resume)
        step = resume.step
        best_val = resume.meta.get("best_val_med", float("inf"))
        best_step = resume.meta.get("best_step", 0)
        stale = resume.meta.get("stale_evals", 0)
        config = net.config
    else:
        net = GazeNet(config)
        schedule = copy.deepcopy(config.schedule)
        net.params["head.b"].value[...] = train_data["targets"].mean(axis=0)
        step = 0
        best_val = float("inf")
        best_step = 0
        stale = 0
    bs = min(config.batch_size, n)
    per_epoch = n // bs
    history = []
    best_ckpt = None
    has_val = val_data is not None and len(val_data["targets"]) > 0

    def snapshot(at):
        extra = {"best_val_med": best_val, "best_step": best_step, "stale_evals": stale}
        return ck.from_network(net, step=at, schedule=schedule, extra=extra)

    order = None
    order_epoch = -1
    params = list(net.params.values())
    while step < config.max_steps:
        epoch, pos = divmod(step, per_epoch)
        if epoch != order_epoch:
            order = _epoch_order(n, config.seed, epoch)
            order_epoch = epoch
        idx = np.sort(order[pos * bs:(pos + 1) * bs])
        left, right, corners, targets = _batch(train_data, idx)
        lr = nx.lr_at(schedule, step)
        try:
            net.zero_grad()
            pred, _ = net.forward(left, right, corners, mode="train")
            loss, grad = nx.mse_loss(pred, targets)
            if not np.isfinite(loss):
                raise NumericFault("non-finite loss")
            net.backward(grad)
            nx.adam_step(params, lr, t=step + 1)
        except NumericFault as exc:
            raise NumericFault(str(exc).split(" (step")[0], step=step) from exc
        step += 1
        row = {"step": step, "lr": lr, "train_loss": loss,
               "train_med": med(pred, targets), "val_med": None}
        if step % config.eval_every == 0 or step == config.max_steps:
            if has_val:
                val, _ = evaluate_network(net, val_data)
                row["val_med"] = val
                if schedule.kind == "reduce_on_plateau":
                    nx.lr_at(schedule, step, plateau_signal=val)
                if val < best_val:
                    best_val, best_step, stale = val, step, 0
                    best_ckpt = snapshot(step)
                else:
                    stale += 1
            history.append(row)
            if on_log:
                on_log(row)
            log.info("step %d lr %.6g loss %.4f val_med %s", step, lr, loss, row["val_med"])
            if has_val and config.early_stop_patience and stale >= config.early_stop_patience:
                break
        else:
            history.append(row)
            if on_log:
                on_log(row)
    last = snapshot(step)
    if best_ckpt is None:
        if has_val and resume is not None and np.isfinite(best_val):
            # best weights came from before the resume point; keep the latest
            log.warning("best checkpoint predates resume; returning latest weights")
        best_ckpt = last
        if not has_val:
            best_step = step
    return TrainResult(best=best_ckpt, last=last, history=history,
                       best_step=best_step, best_val_med=best_val if has_val else float("nan"))


@dataclass
class FeatureRow:
    key: str
    participant_id: str
    dot_id: int
    penultimate: np.ndarray
    base_pred: np.ndarray
    truth: np.ndarray


def extract_features(net, records, data, batch_size=256):
    """Infer-mode pass yielding key-aligned penultimate/prediction/truth rows.

    ``records`` maps frame key to its FrameRecord; ``data`` is the output of
    :func:`~gazekit.gazenet.preprocess.preprocess_records`.
    """
    if isinstance(net, ck.Checkpoint):
        net = ck.to_network(net)
    pred, feats = net.predict(data["left"], data["right"], data["corners"], batch_size=batch_size)
    rows = []
    for i, key in enumerate(data["keys"]):
        rec = records[key]
        rows.append(FeatureRow(key=key, participant_id=rec.participant_id, dot_id=rec.dot_id,
                               penultimate=feats[i].astype(np.float64),
                               base_pred=pred[i].astype(np.float64),
                               truth=np.asarray(data["targets"][i], dtype=np.float64)))
    return rows

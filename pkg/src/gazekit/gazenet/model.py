"""Two-tower gaze network: forward, backward, parameter bookkeeping."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .. import numerics as nx
from ..errors import ShapeMismatch
from .config import PENULTIMATE_WIDTH, GazeNetConfig


class GazeNet:
    """Shared conv tower applied to both eye crops, a landmark branch and a
    fully-connected fusion head ending in a width-4 penultimate layer.

    Both crops go through the tower in a single stacked batch (left rows
    first), so batch-norm statistics are shared by the two eyes just like the
    weights.
    """

    def __init__(self, config=None, dtype=np.float32):
        self.config = config or GazeNetConfig()
        if self.config.fusion_units[-1] != PENULTIMATE_WIDTH:
            raise ShapeMismatch("penultimate width must be 4")
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.buffers = OrderedDict()
        self._cache = None
        self._init(np.random.default_rng(self.config.seed))

    # -- construction -------------------------------------------------------

    def _add(self, name, arr):
        self.params[name] = nx.Parameter(np.ascontiguousarray(arr, dtype=self.dtype))

    def _dense(self, name, rng, din, dout, gain=2.0, bias=0.0):
        self._add(f"{name}.w", rng.normal(0.0, np.sqrt(gain / din), (din, dout)))
        self._add(f"{name}.b", np.full(dout, bias))

    def _init(self, rng):
        cfg = self.config
        cin = 3
        for i, (k, cout) in enumerate(zip(cfg.tower_kernels, cfg.tower_channels)):
            fan_in = k * k * cin
            self._add(f"tower.conv{i}.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), (k, k, cin, cout)))
            self._add(f"tower.conv{i}.b", np.zeros(cout))
            self._add(f"tower.bn{i}.gamma", np.ones(cout))
            self._add(f"tower.bn{i}.beta", np.zeros(cout))
            self.buffers[f"tower.bn{i}.running_mean"] = np.zeros(cout, dtype=self.dtype)
            self.buffers[f"tower.bn{i}.running_var"] = np.ones(cout, dtype=self.dtype)
            cin = cout
        self._dense("eye_reduce", rng, cin, cfg.eye_reduction_units, bias=0.01)
        din = 8
        for i, u in enumerate(cfg.landmark_units):
            self._dense(f"landmark.fc{i}", rng, din, u, bias=0.01)
            din = u
        din = cfg.eye_reduction_units + cfg.landmark_units[-1]
        for i, u in enumerate(cfg.fusion_units):
            self._dense(f"fusion.fc{i}", rng, din, u, bias=0.01)
            din = u
        self._dense("head", rng, din, cfg.output_dim, gain=1.0)

    def parameter_count(self):
        return int(sum(p.value.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype):
        """Copy of this network with parameters and buffers cast to ``dtype``."""
        other = GazeNet.__new__(GazeNet)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = OrderedDict(
            (k, nx.Parameter(p.value.astype(dtype))) for k, p in self.params.items())
        other.buffers = OrderedDict((k, v.astype(dtype)) for k, v in self.buffers.items())
        other._cache = None
        return other

    # -- forward / backward -------------------------------------------------

    def forward(self, left, right, corners, mode="infer"):
        """Return ``(gaze_pred [n,2], penultimate [n,4])``.

        ``left`` must already be mirrored. Caches intermediates for
        :meth:`backward`.
        """
        cfg = self.config
        P = {k: p.value for k, p in self.params.items()}
        if left.shape != right.shape or left.ndim != 4 or left.shape[1:] != (cfg.crop_size, cfg.crop_size, 3):
            raise ShapeMismatch(
                f"eye crops must be (n,{cfg.crop_size},{cfg.crop_size},3), got {left.shape} / {right.shape}")
        n = left.shape[0]
        if n == 0:
            raise ShapeMismatch("empty batch")
        if corners.shape != (n, 8):
            raise ShapeMismatch(f"corners must be ({n}, 8), got {corners.shape}")
        caches = []
        h = np.concatenate([left, right], axis=0).astype(self.dtype, copy=False)
        for i in range(len(cfg.tower_channels)):
            h, c_conv = nx.conv2d_forward(h, P[f"tower.conv{i}.w"], P[f"tower.conv{i}.b"],
                                          stride=1, padding=cfg.padding)
            h, c_bn = nx.batchnorm_forward(
                h, P[f"tower.bn{i}.gamma"], P[f"tower.bn{i}.beta"],
                self.buffers[f"tower.bn{i}.running_mean"], self.buffers[f"tower.bn{i}.running_var"],
                eps=cfg.bn_eps, momentum=cfg.bn_momentum, mode=mode)
            h, c_relu = nx.relu_forward(h)
            h, c_pool = nx.pool2d_forward(h, kind=cfg.pooling, size=2, stride=2)
            caches.append((c_conv, c_bn, c_relu, c_pool))
        g, c_gap = nx.global_avg_pool_forward(h)
        e, c_red = nx.fully_connected_forward(g, P["eye_reduce.w"], P["eye_reduce.b"])
        e, c_red_relu = nx.relu_forward(e)
        eye = e[:n] + e[n:]

        lm = corners.astype(self.dtype, copy=False)
        lm_caches = []
        for i in range(len(cfg.landmark_units)):
            lm, c_fc = nx.fully_connected_forward(lm, P[f"landmark.fc{i}.w"], P[f"landmark.fc{i}.b"])
            lm, c_r = nx.relu_forward(lm)
            lm_caches.append((c_fc, c_r))

        z = np.concatenate([eye, lm], axis=1)
        fu_caches = []
        for i in range(len(cfg.fusion_units)):
            z, c_fc = nx.fully_connected_forward(z, P[f"fusion.fc{i}.w"], P[f"fusion.fc{i}.b"])
            z, c_r = nx.relu_forward(z)
            fu_caches.append((c_fc, c_r))
        penult = z
        out, c_head = nx.fully_connected_forward(penult, P["head.w"], P["head.b"])
        self._cache = (n, caches, c_gap, c_red, c_red_relu, lm_caches, fu_caches, c_head)
        return out, penult

    def backward(self, dout):
        """Accumulate parameter gradients for upstream gradient ``dout`` [n,2].

        Returns the input gradients ``(d_left, d_right, d_corners)``.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        cfg = self.config
        n, caches, c_gap, c_red, c_red_relu, lm_caches, fu_caches, c_head = self._cache
        G = self.params

        def acc(name, g):
            G[name].grad += g

        dz, dw, db = nx.fully_connected_backward(dout, c_head)
        acc("head.w", dw)
        acc("head.b", db)
        for i in reversed(range(len(cfg.fusion_units))):
            c_fc, c_r = fu_caches[i]
            dz = nx.relu_backward(dz, c_r)
            dz, dw, db = nx.fully_connected_backward(dz, c_fc)
            acc(f"fusion.fc{i}.w", dw)
            acc(f"fusion.fc{i}.b", db)
        ne = cfg.eye_reduction_units
        deye, dlm = dz[:, :ne], dz[:, ne:]
        for i in reversed(range(len(cfg.landmark_units))):
            c_fc, c_r = lm_caches[i]
            dlm = nx.relu_backward(dlm, c_r)
            dlm, dw, db = nx.fully_connected_backward(dlm, c_fc)
            acc(f"landmark.fc{i}.w", dw)
            acc(f"landmark.fc{i}.b", db)
        de = np.concatenate([deye, deye], axis=0)
        de = nx.relu_backward(de, c_red_relu)
        dg, dw, db = nx.fully_connected_backward(de, c_red)
        acc("eye_reduce.w", dw)
        acc("eye_reduce.b", db)
        dh = nx.global_avg_pool_backward(dg, c_gap)
        for i in reversed(range(len(cfg.tower_channels))):
            c_conv, c_bn, c_relu, c_pool = caches[i]
            dh = nx.pool2d_backward(dh, c_pool)
            dh = nx.relu_backward(dh, c_relu)
            dh, dgamma, dbeta = nx.batchnorm_backward(dh, c_bn)
            acc(f"tower.bn{i}.gamma", dgamma)
            acc(f"tower.bn{i}.beta", dbeta)
            dh, dw, db = nx.conv2d_backward(dh, c_conv)
            acc(f"tower.conv{i}.w", dw)
            acc(f"tower.conv{i}.b", db)
        self._cache = None
        return dh[:n], dh[n:], dlm

    def predict(self, left, right, corners, batch_size=256):
        """Infer-mode forward in chunks; returns ``(pred, penult)`` arrays."""
        preds, feats = [], []
        for s in range(0, left.shape[0], batch_size):
            p, f = self.forward(left[s:s + batch_size], right[s:s + batch_size],
                                corners[s:s + batch_size], mode="infer")
            preds.append(p)
            feats.append(f)
        self._cache = None
        if not preds:
            return np.zeros((0, 2), self.dtype), np.zeros((0, PENULTIMATE_WIDTH), self.dtype)
        return np.concatenate(preds), np.concatenate(feats)


def activation_signature(net):
    """Relu masks and pooling argmaxes from the most recent forward pass."""
    n, caches, c_gap, c_red, c_red_relu, lm_caches, fu_caches, c_head = net._cache
    parts = []
    for c_conv, c_bn, c_relu, c_pool in caches:
        parts.append(c_relu.reshape(-1))
        if c_pool[4] is not None:
            parts.append(c_pool[4].reshape(-1))
    parts.append(c_red_relu.reshape(-1))
    parts.extend(c[1].reshape(-1) for c in lm_caches)
    parts.extend(c[1].reshape(-1) for c in fu_caches)
    return np.concatenate([p.astype(np.int64) for p in parts])

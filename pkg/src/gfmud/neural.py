"""Pre-activated residual multi-label detector, trained with hand-written backprop.

Layout (batch-major arrays, ``W`` stored as ``(out, in)``)::

    y -> dense -> BN -> ReLU = z0
    block l (input x_{l-1}, x_0 = z0):
        dense1 -> BN1 -> ReLU -> dropout
        dense2 (L2 penalised) -> BN2 -> ReLU
        dense3 -> BN3
        dense4 -> BN4 -> ReLU [-> projection when tapered] = zbar_l
        x_l = x_{l-1} + zbar_l
    logits = W_out (z0 + sum_l zbar_l) + b_out ;  p = sigmoid(logits)

The aggregate ``z0 + sum_l zbar_l`` equals ``x_L``, so the sequential skip
chain and the aggregated skip are the same wire.
"""

from __future__ import annotations

import csv
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit

__all__ = [
    "NetworkError",
    "TrainingDiverged",
    "Architecture",
    "MudNetwork",
    "ForwardTrace",
    "TrainConfig",
    "AdamState",
    "init_network",
    "forward",
    "bce_l2_loss",
    "backward",
    "adam_step",
    "train",
    "predict",
    "detect",
    "save_checkpoint",
    "load_checkpoint",
]

CLIP = 1e-7


class NetworkError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Architecture:
    n_features: int
    n_outputs: int
    width: int = 128
    blocks: int = 4
    block_widths: tuple | None = None     # (w1, w2, w3, w4) for the tapered mode
    dropout: float = 0.5
    l2: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.99
    X: int = 1

    def widths(self) -> tuple:
        if self.block_widths is None:
            return (self.width,) * 4
        return tuple(int(w) for w in self.block_widths)

    @property
    def tapered(self) -> bool:
        return self.widths()[-1] != self.width


@dataclass
class MudNetwork:
    arch: Architecture
    params: dict
    buffers: dict
    dtype: type = np.float32

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def astype(self, dtype) -> "MudNetwork":
        return MudNetwork(self.arch,
                          {k: v.astype(dtype) for k, v in self.params.items()},
                          {k: v.astype(dtype) for k, v in self.buffers.items()}, dtype)

    def copy(self) -> "MudNetwork":
        return self.astype(self.dtype)


@dataclass
class ForwardTrace:
    """Cached activations of one training-mode pass."""

    x: np.ndarray
    cache: dict
    masks: list
    stats: dict
    probs: np.ndarray
    logits: np.ndarray


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1000
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.05
    log_path: str | None = None


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def init_network(arch: Architecture, seed=0, dtype=np.float32) -> MudNetwork:
    """He-initialised weights, zero biases, BN scale 1 / shift 0."""
    rng = np.random.default_rng(seed)
    p: dict = {}
    b: dict = {}

    def dense(name, n_out, n_in):
        p[name + ".W"] = rng.normal(0.0, math.sqrt(2.0 / n_in), (n_out, n_in))
        p[name + ".b"] = np.zeros(n_out)

    def bn(name, n):
        p[name + ".g"] = np.ones(n)
        p[name + ".e"] = np.zeros(n)
        b[name + ".mean"] = np.zeros(n)
        b[name + ".var"] = np.ones(n)

    u = arch.width
    dense("in", u, arch.n_features)
    bn("in.bn", u)
    w = arch.widths()
    for l in range(arch.blocks):
        prev = u
        for k in range(4):
            dense(f"b{l}.d{k}", w[k], prev)
            bn(f"b{l}.bn{k}", w[k])
            prev = w[k]
        if arch.tapered:
            p[f"b{l}.P"] = rng.normal(0.0, math.sqrt(1.0 / w[-1]), (u, w[-1]))
    dense("out", arch.n_outputs, u)
    net = MudNetwork(arch, p, b, dtype)
    return net.astype(dtype)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _bn_forward(z, g, e, net, name, train, cache, stats):
    eps = net.arch.bn_eps
    if train:
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xh = (z - mu) * inv
        cache[name] = (xh, inv)
        stats[name] = (mu, var)
    else:
        xh = (z - net.buffers[name + ".mean"]) / np.sqrt(net.buffers[name + ".var"] + eps)
    return xh * g + e


def _bn_backward(dy, g, xh, inv):
    B = dy.shape[0]
    dg = np.einsum("ij,ij->j", dy, xh)
    de = dy.sum(axis=0)
    dxh = dy * g
    dz = (inv / B) * (B * dxh - dxh.sum(axis=0) - xh * np.einsum("ij,ij->j", dxh, xh))
    return dz, dg, de


def forward(net: MudNetwork, batch, mode: str = "infer", rng=None,
            update_stats: bool = False, bn: bool = True):
    """Activity probabilities for a batch of stacked features.

    ``mode="train"`` uses batch statistics and samples inverted-dropout masks
    from `rng`, returning ``(probs, trace)``; ``mode="infer"`` returns the
    probabilities only. ``bn=False`` bypasses every batch-norm layer.
    """
    P = net.params
    a = net.arch
    x = np.asarray(batch, dtype=net.dtype)
    if x.ndim != 2 or x.shape[1] != a.n_features:
        raise NetworkError(f"expected (B, {a.n_features}) features, got {x.shape}")
    train = mode == "train"
    if train and rng is None:
        rng = np.random.default_rng()
    cache: dict = {}
    stats: dict = {}
    masks: list = []
    keep = 1.0 - a.dropout

    def bnorm(z, name):
        if not bn:
            return z
        return _bn_forward(z, P[name + ".g"], P[name + ".e"], net, name, train, cache, stats)

    z = x @ P["in.W"].T + P["in.b"]
    u = bnorm(z, "in.bn")
    z0 = np.maximum(u, 0)
    cache["in"] = (x, u)
    h = z0
    agg = z0.copy()
    for l in range(a.blocks):
        blk = f"b{l}"
        inp = h
        z1 = inp @ P[blk + ".d0.W"].T + P[blk + ".d0.b"]
        u1 = bnorm(z1, blk + ".bn0")
        a1 = np.maximum(u1, 0)
        if train and a.dropout > 0:
            m = (rng.random(a1.shape) < keep).astype(net.dtype) / net.dtype(keep)
            d1 = a1 * m
        else:
            m = None
            d1 = a1
        masks.append(m)
        z2 = d1 @ P[blk + ".d1.W"].T + P[blk + ".d1.b"]
        u2 = bnorm(z2, blk + ".bn1")
        a2 = np.maximum(u2, 0)
        z3 = a2 @ P[blk + ".d2.W"].T + P[blk + ".d2.b"]
        u3 = bnorm(z3, blk + ".bn2")
        z4 = u3 @ P[blk + ".d3.W"].T + P[blk + ".d3.b"]
        u4 = bnorm(z4, blk + ".bn3")
        r = np.maximum(u4, 0)
        zbar = r @ P[blk + ".P"].T if a.tapered else r
        cache[blk] = (inp, u1, d1, u2, a2, u3, u4, r)
        h = inp + zbar
        agg += zbar
    logits = agg @ P["out.W"].T + P["out.b"]
    probs = expit(logits)
    if not np.all(np.isfinite(probs)):
        raise NetworkError("non-finite activations in forward pass")
    if train and update_stats and bn:
        mom = a.bn_momentum
        for name, (mu, var) in stats.items():
            net.buffers[name + ".mean"] *= mom
            net.buffers[name + ".mean"] += (1 - mom) * mu
            net.buffers[name + ".var"] *= mom
            net.buffers[name + ".var"] += (1 - mom) * var
    if not train:
        return probs
    cache["agg"] = agg
    return probs, ForwardTrace(x, cache, masks, stats, probs, logits)


def _bce(probs, labels):
    p = np.clip(probs, CLIP, 1 - CLIP)
    y = np.asarray(labels, dtype=p.dtype)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p)).mean()


def l2_penalty(net: MudNetwork) -> float:
    lam = net.arch.l2
    return sum(0.5 * lam * float(np.sum(net.params[f"b{l}.d1.W"].astype(np.float64) ** 2))
               for l in range(net.arch.blocks))


def bce_l2_loss(probs, labels, net: MudNetwork | None = None) -> float:
    """Mean binary cross-entropy over batch and devices plus the block L2 terms."""
    loss = float(_bce(np.asarray(probs, dtype=np.float64), labels))
    if net is not None:
        loss += l2_penalty(net)
    return loss


def backward(net: MudNetwork, trace: ForwardTrace, labels) -> dict:
    """Gradients of :func:`bce_l2_loss` for every trainable parameter."""
    if trace is None:
        raise NetworkError("backward needs the trace of a training-mode forward pass")
    P = net.params
    a = net.arch
    C = trace.cache
    y = np.asarray(labels, dtype=net.dtype)
    B, N = y.shape
    p = trace.probs
    inside = (p > CLIP) & (p < 1 - CLIP)
    dlogit = ((p - y) * inside / (B * N)).astype(net.dtype)
    g: dict = {}
    g["out.W"] = dlogit.T @ C["agg"]
    g["out.b"] = dlogit.sum(axis=0)
    dh = dlogit @ P["out.W"]            # gradient w.r.t. x_L (== aggregate)
    has_bn = bool(trace.stats) or "in.bn" in C

    def bn_back(dy, name):
        if name not in C:
            return dy
        xh, inv = C[name]
        dz, g[name + ".g"], g[name + ".e"] = _bn_backward(dy, P[name + ".g"], xh, inv)
        return dz

    def dense_back(dz, name, xin):
        g[name + ".W"] = dz.T @ xin
        g[name + ".b"] = dz.sum(axis=0)
        return dz @ P[name + ".W"]

    for l in reversed(range(a.blocks)):
        blk = f"b{l}"
        inp, u1, d1, u2, a2, u3, u4, r = C[blk]
        dzbar = dh
        if a.tapered:
            g[blk + ".P"] = dzbar.T @ r
            dr = dzbar @ P[blk + ".P"]
        else:
            dr = dzbar
        du4 = dr * (u4 > 0)
        dz4 = bn_back(du4, blk + ".bn3")
        du3 = dense_back(dz4, blk + ".d3", u3)
        dz3 = bn_back(du3, blk + ".bn2")
        da2 = dense_back(dz3, blk + ".d2", a2)
        du2 = da2 * (u2 > 0)
        dz2 = bn_back(du2, blk + ".bn1")
        dd1 = dense_back(dz2, blk + ".d1", d1)
        g[blk + ".d1.W"] += a.l2 * P[blk + ".d1.W"]
        m = trace.masks[l]
        da1 = dd1 * m if m is not None else dd1
        du1 = da1 * (u1 > 0)
        dz1 = bn_back(du1, blk + ".bn0")
        dinp = dense_back(dz1, blk + ".d0", inp)
        dh = dh + dinp
    x, u = C["in"]
    du = dh * (u > 0)
    dz = bn_back(du, "in.bn")
    dense_back(dz, "in", x)
    if not has_bn:
        for k in P:
            if k not in g:
                g[k] = np.zeros_like(P[k])
    return g


def adam_step(net: MudNetwork, grads: dict, t: int, config: TrainConfig, state: AdamState) -> MudNetwork:
    """Bias-corrected Adam update applied in place; returns `net`."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, grad in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(net.params[k])
            state.v[k] = np.zeros_like(net.params[k])
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        net.params[k] -= (config.lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(net.dtype)
    state.t = t
    return net


# ---------------------------------------------------------------------------
# Training / inference
# ---------------------------------------------------------------------------


def predict(net: MudNetwork, features, batch_size: int = 4096) -> np.ndarray:
    out = [forward(net, features[i:i + batch_size], "infer")
           for i in range(0, len(features), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.arch.n_outputs))


def detect(probs, threshold: float = 0.5):
    """Support ``{j : p_j >= threshold}`` and its size.

    Works on one probability vector (returns ``(indices, n_hat)``) or on a
    batch (returns ``(binary matrix, n_hat vector)``).
    """
    p = np.asarray(probs)
    hard = p >= threshold
    if p.ndim == 1:
        idx = np.flatnonzero(hard)
        return idx, len(idx)
    return hard.astype(np.uint8), hard.sum(axis=1)


def train(net: MudNetwork, dataset, config: TrainConfig, validation=None,
          callbacks: list[Callable] | None = None, state: AdamState | None = None):
    """Mini-batch Adam training.

    Returns ``(net, log)`` where `log` holds one dict per epoch with keys
    epoch, loss, val_recall, val_precision, val_auc. When `validation` is
    None a `config.val_fraction` slice of `dataset` is held out.
    """
    from .analysis import compute_auc, compute_metrics

    if dataset.features.shape[1] != net.arch.n_features or dataset.N != net.arch.n_outputs:
        raise NetworkError("dataset dimensions do not match the network")
    rng = np.random.default_rng(config.seed)
    if validation is None and config.val_fraction > 0:
        n_val = max(1, int(round(dataset.D * config.val_fraction)))
        perm = rng.permutation(dataset.D)
        validation = dataset.subset(np.sort(perm[:n_val]))
        dataset = dataset.subset(np.sort(perm[n_val:]))
    state = state or AdamState()
    X = dataset.features.astype(net.dtype, copy=False)
    Y = dataset.labels
    log = []
    writer = None
    fh = None
    if config.log_path:
        Path(config.log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(config.log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_recall", "val_precision", "val_auc"])
    t = state.t
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(X))
            total, count = 0.0, 0
            for s in range(0, len(X), config.batch_size):
                idx = order[s:s + config.batch_size]
                if len(idx) < 2:
                    continue
                probs, trace = forward(net, X[idx], "train", rng, update_stats=True)
                loss = bce_l2_loss(probs, Y[idx], net)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, step {t + 1}: "
                        f"max |logit| = {np.nanmax(np.abs(trace.logits)):.3g}")
                grads = backward(net, trace, Y[idx])
                t += 1
                adam_step(net, grads, t, config, state)
                total += loss * len(idx)
                count += len(idx)
            row = {"epoch": epoch, "loss": total / max(count, 1),
                   "val_recall": float("nan"), "val_precision": float("nan"),
                   "val_auc": float("nan"), "seconds": time.perf_counter() - t0}
            if validation is not None and validation.D:
                pv = predict(net, validation.features)
                rep = compute_metrics(detect(pv)[0], validation.labels)
                row["val_recall"] = rep.recall
                row["val_precision"] = rep.precision
                try:
                    row["val_auc"] = compute_auc(pv, validation.labels)
                except ValueError:
                    pass
            log.append(row)
            if writer:
                writer.writerow([epoch, f"{row['loss']:.8g}", f"{row['val_recall']:.6f}",
                                 f"{row['val_precision']:.6f}", f"{row['val_auc']:.6f}"])
                fh.flush()
            for cb in callbacks or ():
                cb(row)
    finally:
        if fh:
            fh.close()
    return net, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_NN_MAGIC = b"NMNN"
_NN_VERSION = 1


def save_checkpoint(net: MudNetwork, path, state: AdamState | None = None,
                    extra: dict | None = None) -> None:
    """Binary checkpoint: magic, u32 version, u32 descriptor length, JSON
    architecture descriptor, then f32 tensors in descriptor order."""
    names = sorted(net.params)
    bufs = sorted(net.buffers)
    desc = {
        "arch": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(net.arch).items()},
        "params": [[n, list(net.params[n].shape)] for n in names],
        "buffers": [[n, list(net.buffers[n].shape)] for n in bufs],
        "adam_t": state.t if state and state.m else None,
        "extra": extra or {},
    }
    blob = json.dumps(desc).encode()
    with open(path, "wb") as fh:
        fh.write(_NN_MAGIC)
        fh.write(struct.pack("<II", _NN_VERSION, len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(net.params[n], dtype="<f4").tobytes())
        for n in bufs:
            fh.write(np.ascontiguousarray(net.buffers[n], dtype="<f4").tobytes())
        if state and state.m:
            for n in names:
                fh.write(np.ascontiguousarray(state.m[n], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(state.v[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns ``(net, adam_state_or_None, extra)``."""
    data = Path(path).read_bytes()
    if data[:4] != _NN_MAGIC:
        raise NetworkError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 12:
        raise NetworkError(f"{path}: truncated checkpoint")
    version, dlen = struct.unpack_from("<II", data, 4)
    if version != _NN_VERSION:
        raise NetworkError(f"{path}: unsupported checkpoint version {version}")
    desc = json.loads(data[12:12 + dlen])
    off = 12 + dlen
    arch_d = desc["arch"]
    if arch_d.get("block_widths") is not None:
        arch_d["block_widths"] = tuple(arch_d["block_widths"])
    arch = Architecture(**arch_d)

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise NetworkError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data, "<f4", n, off).reshape(shape).astype(np.float32)
        off += 4 * n
        return arr

    params = {n: take(s) for n, s in desc["params"]}
    buffers = {n: take(s) for n, s in desc["buffers"]}
    state = None
    if desc.get("adam_t"):
        state = AdamState(t=desc["adam_t"])
        for n, s in desc["params"]:
            state.m[n] = take(s)
            state.v[n] = take(s)
    return MudNetwork(arch, params, buffers, np.float32), state, desc.get("extra", {})

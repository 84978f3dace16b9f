"""Labelled pilot observations for SMV and MMV activity detection.

A sample is the received pilot ``y_p = Phi (a o g) + w`` split into real and
imaginary parts; its label is the activity vector ``a``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import (
    InfScenario,
    MacroChannelConfig,
    RayleighConfig,
    as_rng,
    sample_channel,
    sample_positions,
    sample_small_scale,
    transmit_scale,
)
from .codes import CodeSet

__all__ = [
    "DatasetError",
    "FormatError",
    "VersionError",
    "TruncationError",
    "ActivityModel",
    "DataConfig",
    "Dataset",
    "sample_activity",
    "synthesize_pilot",
    "stack_features_smv",
    "unstack_features_smv",
    "stack_features_mmv",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

CHUNK = 2048


class DatasetError(ValueError):
    pass


class FormatError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


class TruncationError(DatasetError):
    pass


@dataclass(frozen=True)
class ActivityModel:
    """``fixed``: n drawn uniformly from `n_values`, then a uniform n-subset.
    ``bernoulli``: every device independently active with probability `p`.
    """

    kind: str = "fixed"
    n_values: tuple = (1,)
    p: float = 0.0
    require_active: bool = True

    def describe(self) -> dict:
        return {"kind": self.kind, "n_values": list(self.n_values), "p": self.p,
                "require_active": self.require_active}


def sample_activity(N: int, model: ActivityModel, size: int = 1, seed=None) -> np.ndarray:
    """Binary activity matrix of shape ``(size, N)``."""
    rng = as_rng(seed)
    if model.kind == "fixed":
        ns = np.asarray(model.n_values, dtype=int)
        if ns.min() < 1 or ns.max() > N:
            raise DatasetError(f"sparsity {ns.tolist()} infeasible for N={N}")
        n = ns[rng.integers(0, len(ns), size=size)]
        # rank of a random key gives a uniform random permutation per row
        order = np.argsort(rng.random((size, N)), axis=1)
        ranks = np.empty_like(order)
        np.put_along_axis(ranks, order, np.arange(N)[None, :].repeat(size, 0), axis=1)
        return (ranks < n[:, None]).astype(np.uint8)
    if model.kind == "bernoulli":
        if not 0 < model.p < 1:
            raise DatasetError(f"activity probability {model.p} must lie in (0, 1)")
        a = (rng.random((size, N)) < model.p).astype(np.uint8)
        if model.require_active:
            empty = a.sum(axis=1) == 0
            while empty.any():
                a[empty] = (rng.random((int(empty.sum()), N)) < model.p).astype(np.uint8)
                empty = a.sum(axis=1) == 0
        return a
    raise DatasetError(f"unknown activity model {model.kind!r}")


def synthesize_pilot(Phi, activity, channel, noise_var: float = 0.0, seed=None) -> np.ndarray:
    """``Phi (a o h) + w`` for one sample.

    `channel` of shape ``(N,)`` gives a K-vector; shape ``(N, X)`` gives the
    K x X MMV observation sharing one activity vector.
    """
    Phi = np.asarray(Phi, dtype=complex)
    a = np.asarray(activity)
    h = np.asarray(channel, dtype=complex)
    K, N = Phi.shape
    if a.shape != (N,) or h.shape[0] != N:
        raise DatasetError(f"dimension mismatch: Phi {Phi.shape}, a {a.shape}, h {h.shape}")
    phi = (a[:, None] * h) if h.ndim == 2 else a * h
    y = Phi @ phi
    if noise_var > 0:
        y = y + np.sqrt(noise_var) * sample_small_scale(y.shape, seed)
    return y


def stack_features_smv(y) -> np.ndarray:
    y = np.asarray(y)
    return np.concatenate([y.real, y.imag], axis=-1)


def unstack_features_smv(v) -> np.ndarray:
    v = np.asarray(v)
    K = v.shape[-1] // 2
    return v[..., :K] + 1j * v[..., K:]


def stack_features_mmv(Y) -> np.ndarray:
    """Antenna-ordered SMV stacking of a K x X (or batched B x K x X) array."""
    Y = np.asarray(Y)
    blocks = np.concatenate([Y.real, Y.imag], axis=-2)      # (..., 2K, X)
    return np.swapaxes(blocks, -1, -2).reshape(*Y.shape[:-2], -1)


@dataclass
class DataConfig:
    codes: CodeSet
    D: int
    channel: object = field(default_factory=RayleighConfig)
    snr_db: tuple = (0.0, 20.0)
    activity: ActivityModel = field(default_factory=ActivityModel)
    X: int = 1
    seed: int = 0
    pilots: object = None
    normalize_power: bool = True
    pilot_point: int = 0

    def digest(self) -> bytes:
        desc = {
            "codes": hashlib.sha256(np.ascontiguousarray(self.codes.codewords).tobytes()).hexdigest(),
            "D": self.D,
            "channel": repr(self.channel),
            "snr_db": list(np.atleast_1d(self.snr_db).astype(float)),
            "activity": self.activity.describe(),
            "X": self.X,
            "seed": self.seed,
            "pilots": None if self.pilots is None else np.asarray(self.pilots).tolist().__repr__(),
            "normalize_power": self.normalize_power,
            "pilot_point": self.pilot_point,
        }
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).digest()[:8]


@dataclass
class Dataset:
    features: np.ndarray          # (D, 2 K X) float32
    labels: np.ndarray            # (D, N) uint8
    X: int = 1
    snr_db: np.ndarray | None = None
    config_hash: bytes = b"\0" * 8

    @property
    def D(self) -> int:
        return self.features.shape[0]

    @property
    def N(self) -> int:
        return self.labels.shape[1]

    @property
    def K(self) -> int:
        return self.features.shape[1] // (2 * self.X)

    @property
    def mode(self) -> str:
        return "smv" if self.X == 1 else "mmv"

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.X,
                       None if self.snr_db is None else self.snr_db[idx], self.config_hash)


def _draw_snr(spec, size, rng):
    s = np.atleast_1d(np.asarray(spec, dtype=float))
    if s.size == 1:
        return np.full(size, s[0])
    if s.size == 2:
        return rng.uniform(s[0], s[1], size=size)
    raise DatasetError("snr_db must be a value or a (low, high) range")


def _chunk(cfg: DataConfig, Phi, start: int, size: int):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, start // CHUNK]))
    K, N = Phi.shape
    X = cfg.X
    a = sample_activity(N, cfg.activity, size, rng)
    snr = _draw_snr(cfg.snr_db, size, rng)
    pos = sample_positions(cfg.channel, (size, N), rng)
    pos = np.repeat(pos[:, :, None], X, axis=2)
    draw = sample_channel(cfg.channel, pos, rng)
    # large-scale terms are per device; re-use the first antenna's value
    beta = draw.large_scale[:, :, :1]
    g = np.sqrt(beta) * draw.small_scale
    col_energy = np.sum(np.abs(Phi) ** 2, axis=0)          # (N,)
    phi = a[:, :, None] * g                                  # (B, N, X)
    Y = np.einsum("kn,bnx->bkx", Phi, phi)
    if cfg.normalize_power:
        # mean received pilot energy per resource per active device -> 1
        e = (a * beta[:, :, 0] * col_energy[None, :]).sum(axis=1) / K
        nact = np.maximum(a.sum(axis=1), 1)
        scale = np.sqrt(nact / np.where(e > 0, e, 1.0))
        Y = Y * scale[:, None, None]
        noise_var = 10.0 ** (-snr / 10.0)
    else:
        p_tx, n_w = transmit_scale(cfg.channel)
        Y = Y * np.sqrt(p_tx)
        noise_var = np.full(size, n_w) if not isinstance(cfg.channel, RayleighConfig) \
            else 10.0 ** (-snr / 10.0)
    W = sample_small_scale((size, K, X), rng) * np.sqrt(noise_var)[:, None, None]
    Y = Y + W
    feats = stack_features_mmv(Y).astype(np.float32)
    return feats, a, snr.astype(np.float32)


def generate_dataset(cfg: DataConfig, workers: int = 1) -> Dataset:
    """Draw `cfg.D` samples.

    Samples are produced in fixed-size chunks, each from its own
    ``SeedSequence([seed, chunk])`` substream, so the output does not depend
    on `workers`.
    """
    Phi = cfg.codes.sensing_matrix(cfg.pilots, cfg.pilot_point)
    starts = list(range(0, cfg.D, CHUNK))
    jobs = [(s, min(CHUNK, cfg.D - s)) for s in starts]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda j: _chunk(cfg, Phi, *j), jobs))
    else:
        parts = [_chunk(cfg, Phi, *j) for j in jobs]
    if not parts:
        raise DatasetError("D must be >= 1")
    feats, labels, snr = (np.concatenate(p) for p in zip(*parts))
    return Dataset(feats, labels, cfg.X, snr, cfg.digest())


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

_DS_MAGIC = b"NMUD"
_DS_VERSION = 1
# magic, version, D, feature_len, N, mode, X, reserved[6], config hash[8]
_DS_HEADER = struct.Struct("<4sIIIIBB6x8s")


def save_dataset(ds: Dataset, path) -> None:
    """Write the binary dataset container.

    Layout after the header: features (f32, sample-major), labels (u8),
    then per-sample SNR in dB (f32; NaN when unknown).
    """
    feats = np.ascontiguousarray(ds.features, dtype="<f4")
    labels = np.ascontiguousarray(ds.labels, dtype=np.uint8)
    snr = np.full(ds.D, np.nan, dtype="<f4") if ds.snr_db is None else \
        np.ascontiguousarray(ds.snr_db, dtype="<f4")
    header = _DS_HEADER.pack(_DS_MAGIC, _DS_VERSION, ds.D, feats.shape[1], ds.N,
                             0 if ds.X == 1 else 1, ds.X, ds.config_hash)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())
        fh.write(snr.tobytes())


def load_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != _DS_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic)")
    if len(data) < _DS_HEADER.size:
        raise TruncationError(f"{path}: truncated header")
    magic, version, D, flen, N, mode, X, chash = _DS_HEADER.unpack_from(data)
    if version != _DS_VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    if X < 1 or flen % (2 * X) or mode != (0 if X == 1 else 1):
        raise FormatError(f"{path}: corrupt header")
    off = _DS_HEADER.size
    need = off + D * flen * 4 + D * N + D * 4
    if len(data) < need:
        raise TruncationError(f"{path}: expected {need} bytes, found {len(data)}")
    feats = np.frombuffer(data, "<f4", D * flen, off).reshape(D, flen).astype(np.float32)
    off += D * flen * 4
    labels = np.frombuffer(data, np.uint8, D * N, off).reshape(D, N).copy()
    off += D * N
    snr = np.frombuffer(data, "<f4", D, off).astype(np.float32)
    return Dataset(feats, labels, X, None if np.isnan(snr).all() else snr, chash)

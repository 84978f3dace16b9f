"""Glue between an ExperimentConfig and the library: codes, data, training, sweeps."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import compute_metrics
from .baselines import ls_bomp, stomp
from .channel import InfScenario, MacroChannelConfig, RayleighConfig
from .codes import (
    CodeSet,
    assign_phase_rotations,
    build_factor_graph,
    build_mother_constellation,
    build_scma_codebook,
    select_musa_sequences,
)
from .config import ConfigError, ExperimentConfig, config_hash, float_list, int_list
from .datagen import ActivityModel, DataConfig, Dataset, generate_dataset
from .neural import Architecture, TrainConfig, detect, init_network, predict

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["recall", "misdetection", "precision", "accuracy", "auc", "runtime_us"]


def build_codes(cfg: ExperimentConfig) -> CodeSet:
    s = cfg.scheme
    if s.name == "scma":
        F = build_factor_graph(s.K, s.N, s.U)
        Ft = assign_phase_rotations(F, s.R)
        return build_scma_codebook(Ft, build_mother_constellation(s.R, s.U)).to_codeset()
    return select_musa_sequences(s.rho, s.N, seed=s.seed, K=s.K,
                                 min_nonzero=s.min_nonzero).to_codeset()


def channel_config(cfg: ExperimentConfig):
    c = cfg.channel
    if c.kind == "rayleigh":
        return RayleighConfig()
    if c.kind == "macro":
        kw = {"shadow_std_db": c.shadow_std_db, "r_min_km": c.r_min_km, "r_max_km": c.r_max_km}
        if c.bandwidth_hz > 0:
            kw["bandwidth_hz"] = c.bandwidth_hz
        try:
            return MacroChannelConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"bad macro channel settings: {exc}") from None
    kw = {"fc_ghz": c.fc_ghz, "shadow_before_max": c.shadow_before_max}
    if c.bandwidth_hz > 0:
        kw["bandwidth_hz"] = c.bandwidth_hz
    try:
        return InfScenario.preset(c.inf, **kw)
    except ValueError as exc:
        raise ConfigError(f"bad InF channel settings: {exc}") from None


def activity_model(cfg: ExperimentConfig, n_values=None) -> ActivityModel:
    t = cfg.train
    if n_values is None and t.activity == "bernoulli":
        return ActivityModel("bernoulli", p=t.p)
    if t.activity not in ("fixed", "bernoulli"):
        raise ConfigError(f"unknown train.activity {t.activity!r}")
    return ActivityModel("fixed", tuple(n_values or int_list(t.n_values)))


def data_config(cfg: ExperimentConfig, codes: CodeSet, D: int, snr, seed: int,
                n_values=None) -> DataConfig:
    return DataConfig(codes, D, channel_config(cfg), snr, activity_model(cfg, n_values),
                      cfg.network.X, seed, normalize_power=cfg.channel.normalize_power)


def training_data(cfg: ExperimentConfig, codes: CodeSet) -> Dataset:
    t = cfg.train
    return generate_dataset(data_config(cfg, codes, t.D, (t.snr_low, t.snr_high), t.seed))


def architecture(cfg: ExperimentConfig, codes: CodeSet) -> Architecture:
    n = cfg.network
    bw = tuple(int_list(n.block_widths)) or None
    if bw is not None and len(bw) != 4:
        raise ConfigError("network.block_widths needs four comma-separated widths")
    return Architecture(2 * codes.K * n.X, codes.N, n.width, n.L, bw, n.dropout, n.l2, X=n.X)


def new_network(cfg: ExperimentConfig, codes: CodeSet):
    return init_network(architecture(cfg, codes), seed=cfg.train.seed)


def train_config(cfg: ExperimentConfig, log_path=None) -> TrainConfig:
    t = cfg.train
    return TrainConfig(lr=t.lr, batch_size=t.batch_size, epochs=t.epochs, seed=t.seed,
                       val_fraction=t.val_fraction, log_path=log_path)


def data_fingerprint(cfg: ExperimentConfig) -> dict:
    """Settings a checkpoint must share with any data it is evaluated on."""
    s = cfg.scheme
    return {"scheme": s.name, "K": s.K, "N": s.N, "U": s.U, "R": s.R, "rho": s.rho,
            "code_seed": s.seed, "X": cfg.network.X}


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    variable: str
    rows: list = field(default_factory=list)

    def column(self, algorithm: str, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["algorithm"] == algorithm])

    def grid(self) -> list:
        seen = []
        for r in self.rows:
            if r[self.variable] not in seen:
                seen.append(r[self.variable])
        return seen

    def write_csv(self, path, chash: str) -> None:
        write_csv(path, chash, [self.variable, "algorithm"] + SWEEP_COLUMNS,
                  [[r[self.variable], r["algorithm"]] + [r[k] for k in SWEEP_COLUMNS]
                   for r in self.rows])


def write_csv(path, chash: str, header, rows) -> None:
    """CSV with a leading ``# config_hash=...`` comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else "nan"
    return v


def _baseline_predict(name: str, ds: Dataset, Phi, cfg: ExperimentConfig) -> np.ndarray:
    from .datagen import unstack_features_smv

    Y = unstack_features_smv(ds.features.astype(np.float64))
    n_true = ds.labels.sum(axis=1).astype(int)
    N = ds.N
    out = np.zeros((ds.D, N), dtype=np.uint8)
    sw = cfg.sweep
    for i in range(ds.D):
        if name == "stomp":
            res = stomp(Y[i], Phi, stages=sw.stomp_stages, t=sw.stomp_t,
                        n_known=int(n_true[i]) if sw.stomp_known_sparsity else None)
        else:
            res = ls_bomp(Y[i], Phi, int(max(n_true[i], 1)))
        out[i] = res.indicator(N)
    return out


def evaluate_dataset(ds: Dataset, codes: CodeSet, cfg: ExperimentConfig, net=None,
                     algorithms=None, timing: bool = True) -> list[dict]:
    """One row per algorithm; every detector sees the same samples.

    With ``timing=False`` the runtime column is NaN so reruns are byte-identical.
    """
    algorithms = algorithms or [a.strip() for a in cfg.sweep.algorithms.split(",") if a.strip()]
    rows = []
    Phi = codes.sensing_matrix()
    for alg in algorithms:
        scores = None
        t0 = time.perf_counter()
        if alg == "dnn":
            if net is None:
                raise ConfigError("algorithm 'dnn' needs a trained checkpoint")
            scores = predict(net, ds.features)
            pred = detect(scores)[0]
        elif alg in ("stomp", "ls-bomp"):
            if ds.X != 1:
                log.warning("%s works on single-antenna data only; skipped for X=%d", alg, ds.X)
                continue
            pred = _baseline_predict(alg, ds, Phi, cfg)
        else:
            raise ConfigError(f"unknown algorithm {alg!r}")
        elapsed = time.perf_counter() - t0
        rep = compute_metrics(pred, ds.labels, scores)
        rows.append({"algorithm": alg, "recall": rep.recall, "misdetection": rep.misdetection,
                     "precision": rep.precision, "accuracy": rep.accuracy, "auc": rep.auc,
                     "runtime_us": 1e6 * elapsed / ds.D if timing else float("nan")})
    return rows


def run_sweep(cfg: ExperimentConfig, codes: CodeSet, net=None, variable: str = "snr",
              workers: int = 1, algorithms=None, timing: bool = True) -> SweepResult:
    """Evaluate on every grid point of ``sweep.snr`` or ``sweep.activity_grid``.

    Point ``i`` always draws its test set from seed ``sweep.seed + i``, and rows
    are emitted in grid order whatever the completion order.
    """
    sw = cfg.sweep
    if variable == "snr":
        grid = float_list(sw.snr)
        points = [(v, v, None) for v in grid]
    elif variable == "n":
        grid = int_list(sw.activity_grid)
        for n in grid:
            if not 1 <= n <= codes.N:
                raise ConfigError(f"activity {n} outside 1..{codes.N}")
        points = [(v, sw.activity_snr, (v,)) for v in grid]
    else:
        raise ConfigError(f"unknown sweep variable {variable!r}")

    def one(i):
        value, snr, n_values = points[i]
        ds = generate_dataset(data_config(cfg, codes, sw.test_size, float(snr), sw.seed + i,
                                          n_values or tuple(int_list(sw.n_values))))
        rows = evaluate_dataset(ds, codes, cfg, net, algorithms, timing)
        for r in rows:
            r[variable] = value
        return rows

    with ThreadPoolExecutor(max(1, workers)) as ex:
        parts = list(ex.map(one, range(len(points))))
    return SweepResult(variable, [r for p in parts for r in p])


def experiment_hash(cfg: ExperimentConfig) -> str:
    return config_hash(cfg)

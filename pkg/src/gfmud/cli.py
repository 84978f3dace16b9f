"""Command-line front end. Exit codes: 0 success, 2 config error, 3 runtime failure."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .analysis import (
    calibration_curve,
    compute_metrics,
    coverage_bound,
    coverage_mc_curve,
    flops_dnn,
)
from .channel import InfScenario, inf_distance_3d, inf_los_probability, inf_pathloss_db
from .codes import CodeSet, correlation_matrix, load_codeset, save_codeset
from .config import PRESETS, ConfigError, config_hash, load_config
from .datagen import load_dataset, save_dataset
from .neural import detect, load_checkpoint, predict, save_checkpoint, train

log = logging.getLogger("gfmud")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="INI file with [scheme] [channel] [network] [train] [sweep]")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--deterministic", action="store_true",
                   help="omit wall-clock columns so reruns are byte-identical")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="gfmud", description="Grant-free NOMA activity detection experiments.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-codes", help="build the code set and its correlation CSV")
    _common(p)

    p = sub.add_parser("gen-data", help="generate a training (and optional test) dataset")
    _common(p)
    p.add_argument("--codes", help="existing code-set file")
    p.add_argument("--test-snr", type=float, help="also write test.nmud at this SNR")
    p.add_argument("--test-size", type=int)

    p = sub.add_parser("train", help="train the detector")
    _common(p)
    p.add_argument("--codes")
    p.add_argument("--data", help="training dataset (generated from the config if absent)")

    p = sub.add_parser("eval", help="evaluate a checkpoint and baselines over a sweep grid")
    _common(p)
    p.add_argument("--codes")
    p.add_argument("--checkpoint")
    p.add_argument("--var", choices=("snr", "n"), default="snr")
    p.add_argument("--algorithms", help="comma list from dnn,stomp,ls-bomp")

    p = sub.add_parser("sweep", help="codes, data, training, then SNR and activity sweeps")
    _common(p)

    p = sub.add_parser("analyze", help="metrics and calibration bins")
    _common(p)
    p.add_argument("--predictions", help="CSV with columns sample,device,prob,label")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--bins", type=int, default=10)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("flops", help="per-layer FLOPs breakdown")
    _common(p)
    for k in ("L", "width", "K", "N", "X"):
        p.add_argument(f"--{k}", type=int)

    p = sub.add_parser("coverage", help="label-coverage bound against Monte Carlo")
    _common(p)
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--alpha-max", type=int, default=50)
    p.add_argument("--trials", type=int, default=10**4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--s2-form", choices=("appendix", "lemma"), default="appendix")

    p = sub.add_parser("channel-probe", help="indoor-factory LOS probability and pathloss")
    _common(p)
    p.add_argument("--scenario", default="SL")
    p.add_argument("--fc", type=float, default=28.0, help="carrier frequency in GHz")
    p.add_argument("--points", type=int, default=50)
    return ap


# ---------------------------------------------------------------------------


def _cfg(args):
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"output={args.out}")
    return load_config(args.config, args.preset, overrides)


def _out(cfg) -> Path:
    d = Path(cfg.output)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _codes(cfg, path=None) -> CodeSet:
    if path:
        cs = load_codeset(path)
    else:
        default = Path(cfg.output) / "codes.nmcs"
        cs = load_codeset(default) if default.exists() else ex.build_codes(cfg)
    if (cs.K, cs.N) != (cfg.scheme.K, cfg.scheme.N):
        raise ConfigError(f"code set is {cs.K}x{cs.N}, config expects "
                          f"{cfg.scheme.K}x{cfg.scheme.N}")
    return cs


def cmd_gen_codes(args) -> int:
    cfg = _cfg(args)
    out = _out(cfg)
    h = config_hash(cfg)
    cs = ex.build_codes(cfg)
    save_codeset(cs, out / "codes.nmcs")
    rows = [[i, r, c, float(S[r, c].real), float(S[r, c].imag)]
            for i, S in enumerate(cs.codewords)
            for c in range(S.shape[1]) for r in range(S.shape[0])]
    ex.write_csv(out / "codes.csv", h, ["device", "row", "col", "re", "im"], rows)
    G = correlation_matrix(cs.signatures())
    ex.write_csv(out / "correlation.csv", h, ["device"] + [str(j) for j in range(cs.N)],
                 [[i] + [float(v) for v in G[i]] for i in range(cs.N)])
    off = G - np.diag(np.diag(G))
    log.info("wrote %s (K=%d, N=%d, max off-diagonal correlation %.4f)",
             out / "codes.nmcs", cs.K, cs.N, off.max())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _cfg(args)
    out = _out(cfg)
    cs = _codes(cfg, args.codes)
    ds = ex.training_data(cfg, cs)
    save_dataset(ds, out / "train.nmud")
    log.info("wrote %s (%d samples)", out / "train.nmud", ds.D)
    if args.test_snr is not None:
        size = args.test_size or cfg.sweep.test_size
        from .datagen import generate_dataset
        te = generate_dataset(ex.data_config(cfg, cs, size, args.test_snr, cfg.sweep.seed))
        save_dataset(te, out / "test.nmud")
        log.info("wrote %s (%d samples)", out / "test.nmud", te.D)
    return EXIT_OK


def _train(cfg, cs, data_path=None):
    out = _out(cfg)
    ds = load_dataset(data_path) if data_path else ex.training_data(cfg, cs)
    net = ex.new_network(cfg, cs)
    if ds.features.shape[1] != net.arch.n_features or ds.N != net.arch.n_outputs:
        raise ConfigError(f"dataset shape ({ds.features.shape[1]} features, {ds.N} devices) "
                          "does not match the configured network")
    net, hist = train(net, ds, ex.train_config(cfg),
                      callbacks=[lambda r: log.info("epoch %d loss %.5f val_recall %.4f",
                                                    r["epoch"], r["loss"], r["val_recall"])])
    extra = {"fingerprint": ex.data_fingerprint(cfg), "config_hash": config_hash(cfg),
             "dataset_hash": ds.config_hash.hex()}
    save_checkpoint(net, out / "model.nmnn", extra=extra)
    ex.write_csv(out / "train_log.csv", config_hash(cfg),
                 ["epoch", "loss", "val_recall", "val_precision", "val_auc"],
                 [[r["epoch"], r["loss"], r["val_recall"], r["val_precision"], r["val_auc"]]
                  for r in hist])
    return net


def cmd_train(args) -> int:
    cfg = _cfg(args)
    _train(cfg, _codes(cfg, args.codes), args.data)
    log.info("wrote %s", Path(cfg.output) / "model.nmnn")
    return EXIT_OK


def _load_net(cfg, path):
    net, _, extra = load_checkpoint(path)
    fp = extra.get("fingerprint")
    if fp is not None and fp != ex.data_fingerprint(cfg):
        diff = sorted(k for k in fp if fp[k] != ex.data_fingerprint(cfg).get(k))
        raise ConfigError(f"checkpoint {path} was trained for a different setup ({', '.join(diff)})")
    return net


def _eval(cfg, cs, net, variable, workers, algorithms, timing):
    res = ex.run_sweep(cfg, cs, net, variable, workers, algorithms, timing)
    path = _out(cfg) / f"sweep_{variable}.csv"
    res.write_csv(path, config_hash(cfg))
    log.info("wrote %s (%d rows)", path, len(res.rows))
    return res


def cmd_eval(args) -> int:
    cfg = _cfg(args)
    cs = _codes(cfg, args.codes)
    algs = [a.strip() for a in (args.algorithms or cfg.sweep.algorithms).split(",") if a.strip()]
    net = None
    if "dnn" in algs:
        ck = args.checkpoint or Path(cfg.output) / "model.nmnn"
        if not Path(ck).exists():
            raise ConfigError(f"checkpoint {ck} not found; run train first or drop 'dnn'")
        net = _load_net(cfg, ck)
    _eval(cfg, cs, net, args.var, args.workers, algs, not args.deterministic)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _cfg(args)
    out = _out(cfg)
    cs = ex.build_codes(cfg)
    save_codeset(cs, out / "codes.nmcs")
    net = _train(cfg, cs)
    for var in ("snr", "n"):
        _eval(cfg, cs, net, var, args.workers, None, not args.deterministic)
    return EXIT_OK


def _read_predictions(path):
    probs, labels = {}, {}
    with open(path) as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        need = {"sample", "device", "prob", "label"}
        if not rows.fieldnames or not need <= set(rows.fieldnames):
            raise ConfigError(f"{path}: expected columns {sorted(need)}")
        for r in rows:
            key = (int(r["sample"]), int(r["device"]))
            probs[key] = float(r["prob"])
            labels[key] = int(r["label"])
    if not probs:
        raise ConfigError(f"{path}: no rows")
    S = max(k[0] for k in probs) + 1
    N = max(k[1] for k in probs) + 1
    P = np.full((S, N), np.nan)
    Y = np.zeros((S, N), dtype=np.uint8)
    for k, v in probs.items():
        P[k] = v
        Y[k] = labels[k]
    if np.isnan(P).any():
        raise ConfigError(f"{path}: missing (sample, device) entries")
    return P, Y


def cmd_analyze(args) -> int:
    cfg = _cfg(args)
    out = _out(cfg)
    if args.predictions:
        P, Y = _read_predictions(args.predictions)
    elif args.data and args.checkpoint:
        ds = load_dataset(args.data)
        net, _, _ = load_checkpoint(args.checkpoint)
        if ds.features.shape[1] != net.arch.n_features or ds.N != net.arch.n_outputs:
            raise ConfigError("dataset and checkpoint dimensions differ")
        P, Y = predict(net, ds.features), ds.labels
    else:
        raise UsageError("analyze needs --predictions, or --data with --checkpoint")
    h = config_hash(cfg)
    rep = compute_metrics(detect(P, args.threshold)[0], Y, P)
    d = rep.as_dict()
    ex.write_csv(out / "metrics.csv", h, list(d), [list(d.values())])
    cc = calibration_curve(P, Y, args.bins)
    ex.write_csv(out / "calibration.csv", h,
                 ["bin_low", "bin_high", "mean_predicted", "frequency", "count"],
                 [[cc.edges[b], cc.edges[b + 1], cc.mean_predicted[b], cc.frequency[b],
                   int(cc.counts[b])] for b in range(args.bins)])
    log.info("recall %.4f precision %.4f auc %.4f", rep.recall, rep.precision, rep.auc)
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _cfg(args)
    L = args.L or cfg.network.L
    u = args.width or cfg.network.width
    K = args.K or cfg.scheme.K
    N = args.N or cfg.scheme.N
    X = args.X or cfg.network.X
    fb = flops_dnn(L, u, K, N, X)
    names = ["input_dense", "input_bn", "input_relu", "blocks", "output_dense", "sigmoid"]
    rows = [[f"C{i + 1}", n, v] for i, (n, v) in enumerate(zip(names, fb.components))]
    rows += [["sum", "components", fb.total], ["closed_form", "closed_form", fb.closed_form]]
    ex.write_csv(_out(cfg) / "flops.csv", config_hash(cfg), ["term", "layer", "flops"], rows)
    log.info("FLOPs (L=%d, width=%d, K=%d, N=%d, X=%d): %d", L, u, K, N, X, fb.total)
    return EXIT_OK


def cmd_coverage(args) -> int:
    cfg = _cfg(args)
    if not 2 <= args.n < args.N:
        raise UsageError(f"need 2 <= n < N (got n={args.n}, N={args.N})")
    if args.alpha_max < 1:
        raise UsageError("--alpha-max must be >= 1")
    if args.trials < 10**4:
        raise UsageError("--trials must be >= 10000")
    est, se = coverage_mc_curve(args.N, args.n, args.alpha_max, args.trials, args.seed)
    rows = []
    for a in range(1, args.alpha_max + 1):
        b = coverage_bound(args.N, args.n, a, args.s2_form)
        rows.append([a, b.S1, b.S2, b.delta, b.raw, b.bound, est[a - 1], se[a - 1]])
    ex.write_csv(_out(cfg) / "coverage.csv", config_hash(cfg),
                 ["alpha", "S1", "S2", "delta", "bound_raw", "bound", "mc", "mc_stderr"], rows)
    return EXIT_OK


def cmd_channel_probe(args) -> int:
    cfg = _cfg(args)
    try:
        sc = InfScenario.preset(args.scenario, fc_ghz=args.fc)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    r2d = np.linspace(sc.r2d_min, sc.r2d_max, args.points)
    r3d = inf_distance_3d(sc, r2d)
    p_los = inf_los_probability(sc, r2d)
    pl_los = inf_pathloss_db(sc, r3d, True, shadowing=False)
    pl_nlos = inf_pathloss_db(sc, r3d, False, shadowing=False)
    rows = [[r2d[i], p_los[i], pl_los[i], pl_nlos[i]] for i in range(args.points)]
    ex.write_csv(_out(cfg) / f"channel_{sc.name}.csv", config_hash(cfg),
                 ["r2D", "Pr_LOS", "PL_LOS", "PL_NLOS"], rows)
    return EXIT_OK


COMMANDS = {
    "gen-codes": cmd_gen_codes,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "flops": cmd_flops,
    "coverage": cmd_coverage,
    "channel-probe": cmd_channel_probe,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gfmud: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"gfmud: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"gfmud: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

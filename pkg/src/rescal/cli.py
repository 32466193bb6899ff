"""Command-line pipeline: every subcommand reads and writes files in one run directory.

    rescal gen-synthetic --out run/            # speed.csv, manifest.json (+ graph files)
    rescal train-base --out run/               # base.ckpt, scaler.json, forecast_log.csv
    rescal train-rescal --out run/             # rescal.ckpt
    rescal calibrate --out run/                # calibration.csv, latency.json
    rescal diagnose --out run/                 # metrics, ACF and event reports
    rescal pattern-report --out run/           # patterns.csv, pattern_report.txt
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import diagnostics as diag
from . import graph as G
from .autograd import checkpoint
from .autograd.rng import Rng
from .config import AUTO, RunConfig
from .errors import MissingArtifactError, RescalError
from .estimator import config_dict as rescal_config_dict
from .estimator import load_rescal_checkpoint, rescal_checkpoint, train_rescal
from .models import ForecastLog, base_checkpoint, config_dict, load_base_checkpoint, train_base
from .replay import read_calibration_csv, run_stream

log = logging.getLogger("rescal")

COMMANDS = ("gen-synthetic", "train-base", "train-rescal", "calibrate", "diagnose", "pattern-report")


class Run:
    """A run directory plus its resolved configuration."""

    def __init__(self, out, config: RunConfig, command: str):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.command = command
        self.outputs = []
        self.t0 = time.perf_counter()

    def path(self, name) -> Path:
        return self.dir / name

    def need(self, name, producer) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(str(p), producer)
        return p

    def wrote(self, name) -> Path:
        self.outputs.append(name)
        return self.path(name)

    def finish(self, extra=None) -> dict:
        snap = f"{self.command}.config"
        self.path(snap).write_text(self.config.dumps())
        meta_path = self.path("run.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {"commands": {}}
        entry = {"seed": self.config["seed"], "config_hash": self.config.digest(), "config": snap,
                 "seconds": round(time.perf_counter() - self.t0, 3), "outputs": self.outputs + [snap]}
        if extra:
            entry.update(extra)
        meta["commands"][self.command] = entry
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return entry


# ------------------------------------------------------------------ loading


def load_dataset(run: Run):
    """Dataset and fixed supports (None without a distance file) for this run."""
    cfg = run.config
    manifest = run.path("manifest.json")
    if manifest.exists():
        m = json.loads(manifest.read_text())
        speed = run.path(m["speed_csv"])
        vocab_path = run.path(m["vocab"]) if m.get("vocab") else None
        dist_path = run.path(m["distance_csv"]) if m.get("distance_csv") else None
        zero_missing, day, ratios = m["zero_is_missing"], m["day_length"], tuple(m["ratios"])
    elif cfg["data.speed_csv"]:
        speed = Path(cfg["data.speed_csv"])
        vocab_path = Path(cfg["data.vocab"]) if cfg["data.vocab"] else None
        dist_path = Path(cfg["data.distance_csv"]) if cfg["data.distance_csv"] else None
        zero_missing, day, ratios = cfg["data.zero_is_missing"], cfg["data.day_length"], cfg["data.ratios"]
    else:
        raise MissingArtifactError(str(manifest), "gen-synthetic")
    vocab = D.load_vocab(vocab_path) if vocab_path else None
    ds = D.load_speed_csv(speed, vocab, zero_is_missing=zero_missing, day_length=day, ratios=ratios)
    events = run.path("events.csv")
    if manifest.exists() and events.exists():
        ev = np.loadtxt(events, delimiter=",", skiprows=1, dtype=np.int8, ndmin=2).astype(bool)
        ds = dataclasses.replace(ds, events=ev)
    supports = None
    if dist_path is not None:
        ids = vocab or {n: i for i, n in enumerate(ds.node_ids)}
        adj = G.build_gaussian_adjacency(G.load_distance_csv(dist_path, ids), cfg["data.kappa"])
        supports = list(G.transition_matrices(adj))
    return ds, supports


def base_kind(cfg: RunConfig, n_nodes: int) -> str:
    kind = cfg["base.kind"]
    if kind == AUTO:
        return "seq2seq" if n_nodes == 1 else "graph"
    return kind


def base_config(cfg: RunConfig, kind: str):
    return cfg.seq2seq() if kind == "seq2seq" else cfg.graph()


def load_scaler(run: Run) -> D.Scaler:
    s = json.loads(run.need("scaler.json", "train-base").read_text())
    return D.Scaler(s["mean"], s["std"])


def load_base(run: Run, n_nodes: int):
    meta = json.loads(run.need("base.json", "train-base").read_text())
    kind = meta["kind"]
    cfg = base_config(run.config, kind)
    return load_base_checkpoint(kind, cfg, checkpoint.load(run.need("base.ckpt", "train-base"))), kind


def load_rescal(run: Run, window: int, n_nodes: int):
    state = checkpoint.load(run.need("rescal.ckpt", "train-rescal"))
    return load_rescal_checkpoint(run.config.rescal(window), n_nodes, state)


# ------------------------------------------------------------------ commands


def cmd_gen_synthetic(run: Run, nodes=None) -> dict:
    cfg = run.config
    if nodes is not None:
        cfg.set("synthetic.nodes", nodes)
    n = cfg["synthetic.nodes"]
    kw = dict(length=cfg["synthetic.length"], period=cfg["synthetic.period"], p_zero=cfg["synthetic.p_zero"],
              seed=cfg["seed"], day_length=cfg["data.day_length"])
    manifest = {"speed_csv": "speed.csv", "zero_is_missing": False, "day_length": cfg["data.day_length"],
                "ratios": list(cfg["data.ratios"]), "nodes": n, "vocab": None, "distance_csv": None}
    if n == 1:
        ds = D.gen_synthetic(**kw)
    else:
        ds, dist = D.gen_synthetic_spatial(n, propagation_lag=cfg["synthetic.propagation_lag"], **kw)
        D.write_vocab(run.wrote("vocab.txt"), ds.node_ids)
        G.write_distance_csv(run.wrote("distances.csv"), dist, ds.node_ids)
        manifest.update(vocab="vocab.txt", distance_csv="distances.csv")
    D.write_speed_csv(run.wrote("speed.csv"), ds)
    with open(run.wrote("events.csv"), "w") as fh:
        fh.write(",".join(ds.node_ids) + "\n")
        fh.writelines(",".join(str(int(v)) for v in row) + "\n" for row in ds.events)
    manifest["splits"] = dict(zip(("train_end", "val_end"), (int(b) for b in ds.bounds)))
    run.wrote("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run.finish({"rows": ds.length, "nodes": n})


def cmd_train_base(run: Run) -> dict:
    ds, supports = load_dataset(run)
    kind = base_kind(run.config, ds.n_nodes)
    cfg = base_config(run.config, kind)
    scaler = D.Scaler.fit(ds)
    model, flog, hist = train_base(scaler.transform(ds), kind, cfg, run.config["seed"], supports)
    checkpoint.save(run.wrote("base.ckpt"), base_checkpoint(model))
    run.wrote("scaler.json").write_text(json.dumps({"mean": scaler.mean, "std": scaler.std}) + "\n")
    run.wrote("base.json").write_text(json.dumps({"kind": kind, "config": config_dict(cfg)}, indent=2) + "\n")
    flog.write_csv(run.wrote("forecast_log.csv"))
    return run.finish({"kind": kind, "best_epoch": hist.best_epoch, "val_loss": hist.val_loss})


def cmd_train_rescal(run: Run) -> dict:
    ds, supports = load_dataset(run)
    scaler = load_scaler(run)
    base, _ = load_base(run, ds.n_nodes)
    flog = ForecastLog.read_csv(run.need("forecast_log.csv", "train-base"), ds.bounds)
    cfg = run.config.rescal(base.input_len)
    module, hist = train_rescal(flog, scaler.transform(ds), supports, cfg, run.config["seed"])
    checkpoint.save(run.wrote("rescal.ckpt"), rescal_checkpoint(module))
    run.wrote("rescal.json").write_text(json.dumps({"config": rescal_config_dict(cfg)}, indent=2) + "\n")
    return run.finish({"best_epoch": hist.best_epoch, "val_mae": hist.val_loss, "train_mae": hist.train_loss})


def _stream(run: Run, rescal_mode: str, gumbel_mode: str):
    ds, _ = load_dataset(run)
    scaler = load_scaler(run)
    base, _ = load_base(run, ds.n_nodes)
    module = None if rescal_mode == "none" else load_rescal(run, base.input_len, ds.n_nodes)
    rng = Rng(run.config["seed"], (2,))
    return ds, run_stream(ds, scaler, run.config["calibrate.split"], base, module, rng, gumbel_mode)


def cmd_calibrate(run: Run, rescal=None) -> dict:
    mode = rescal or run.config["calibrate.rescal"]
    if mode not in ("trained", "none"):
        raise RescalError(f"--rescal must be 'trained' or 'none', got {mode!r}")
    run.config.set("calibrate.rescal", mode)
    _, clog = _stream(run, mode, run.config["calibrate.gumbel_mode"])
    clog.write_csv(run.wrote("calibration.csv"))
    lat = clog.latency_report()
    run.wrote("latency.json").write_text(json.dumps(lat, indent=2) + "\n")
    return run.finish({"records": len(clog), "warmup_steps": clog.warmup,
                       "warmup_policy": "first T_x + T_y steps of the split emit no records", "latency": lat})


def diagnose_logs(clog, horizons, q=0.8, max_lag=12, acf_horizon=1) -> dict:
    """Base vs calibrated metrics, residual ACF and event-situation summary."""
    horizons = [h for h in horizons if h <= clog.horizon]
    base = diag.metrics(clog.y_pred, clog.y_true)
    cal = diag.metrics(clog.y_calibrated, clog.y_true)
    base_err = np.abs(clog.y_pred - clog.y_true)
    cal_err = np.abs(clog.y_calibrated - clog.y_true)
    ev = diag.event_mask(base_err, q)
    out = {
        "base": base, "calibrated": cal, "horizons": horizons, "events": ev,
        "event_base_mae": float(np.mean(base_err[ev.mask])),
        "event_calibrated_mae": float(np.mean(cal_err[ev.mask])),
        "event_error_share": diag.error_share(base_err, ev.mask),
        "acf_base": diag.acf_summary(clog.y_pred, clog.y_true, acf_horizon, max_lag),
        "acf_calibrated": diag.acf_summary(clog.y_calibrated, clog.y_true, acf_horizon, max_lag),
    }
    out["event_improvement"] = 1 - out["event_calibrated_mae"] / out["event_base_mae"]
    return out


def summary_text(d: dict) -> str:
    hs = d["horizons"]
    lines = [f"mask policy: {diag.MASK_POLICY}", "",
             d["base"].table(hs, "base model"), "", d["calibrated"].table(hs, "calibrated"), "",
             f"residual ACF mean |r_k| (horizon-1 residuals, aggregate over nodes is a reporting addition): "
             f"base {d['acf_base']['mean_abs']:.4f}, calibrated {d['acf_calibrated']['mean_abs']:.4f}",
             f"event situations (base top-{100 * (1 - d['events'].q):.0f}% errors, {d['events'].fraction:.4f} of records): "
             f"base MAE {d['event_base_mae']:.4f}, calibrated MAE {d['event_calibrated_mae']:.4f}, "
             f"improvement {100 * d['event_improvement']:.1f}%",
             f"share of base absolute error inside the event mask: {100 * d['event_error_share']:.1f}%"]
    return "\n".join(lines) + "\n"


def cmd_diagnose(run: Run) -> dict:
    cfg = run.config
    clog = read_calibration_csv(run.need("calibration.csv", "calibrate"))
    d = diagnose_logs(clog, cfg["diagnose.horizons"], cfg["diagnose.q"], cfg["diagnose.max_lag"],
                      cfg["diagnose.acf_horizon"])
    d["base"].write_csv(run.wrote("metrics_base.csv"))
    d["calibrated"].write_csv(run.wrote("metrics_calibrated.csv"))
    for name in ("base", "calibrated"):
        per_node = d[f"acf_{name}"]["per_node"]
        diag.write_acf_csv(run.wrote(f"acf_{name}.csv"), np.nanmean(per_node, axis=0))
        if clog.y_pred.shape[1] > 1:
            y = clog.y_pred if name == "base" else clog.y_calibrated
            res = diag.residual_series(y, clog.y_true, cfg["diagnose.acf_horizon"])
            diag.write_heatmap_csv(run.wrote(f"lag1_corr_{name}.csv"), diag.lag1_cross_corr(res))
    text = summary_text(d)
    run.wrote("summary.txt").write_text(text)
    print(text, end="")
    return run.finish({"event_improvement": d["event_improvement"], "event_error_share": d["event_error_share"],
                       "acf_base": d["acf_base"]["mean_abs"], "acf_calibrated": d["acf_calibrated"]["mean_abs"]})


def cmd_pattern_report(run: Run) -> dict:
    ds, clog = _stream(run, "trained", "argmax")
    clog.write_codes_csv(run.wrote("patterns.csv"))
    res = clog.y_true - clog.y_pred
    rep = diag.pattern_report(clog.codes, res, run.config["pattern.share"])
    lo, _ = ds.split_range(run.config["calibrate.split"])
    extra = {"patterns": len(rep.patterns), "flagged_fraction": rep.flagged_fraction}
    text = rep.summary()
    if ds.events is not None:
        ev = ds.events[clog.t]
        inside = float(ev[rep.flagged].mean()) if rep.flagged.any() else float("nan")
        extra.update(event_rate_flagged=inside, event_rate_overall=float(ev.mean()))
        text += f"\nevent indicator mean: flagged rows {inside:.4f}, all rows {float(ev.mean()):.4f}\n"
    run.wrote("pattern_report.txt").write_text(text)
    print(text, end="")
    return run.finish(extra)


# ------------------------------------------------------------------ entry point


def _global_flags(p, suppress=False):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="key = value config file")
    p.add_argument("--seed", type=int, default=d, help="u64 seed")
    p.add_argument("--out", default=d, help="run directory")
    p.add_argument("--set", action="append", default=d, metavar="KEY=VALUE", help="override a config key")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rescal", description="Residual calibration pipeline")
    _global_flags(p)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        _global_flags(sp, suppress=True)
        if name == "gen-synthetic":
            sp.add_argument("--nodes", type=int, default=None)
        if name == "calibrate":
            sp.add_argument("--rescal", choices=("trained", "none"), default=None)
    return p


def make_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise RescalError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise RescalError(f"--seed must be a u64, got {args.seed}")
        cfg.set("seed", args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = make_config(args)
        run = Run(args.out or os.getcwd(), cfg, args.command)
        if args.command == "gen-synthetic":
            cmd_gen_synthetic(run, args.nodes)
        elif args.command == "train-base":
            cmd_train_base(run)
        elif args.command == "train-rescal":
            cmd_train_rescal(run)
        elif args.command == "calibrate":
            cmd_calibrate(run, args.rescal)
        elif args.command == "diagnose":
            cmd_diagnose(run)
        else:
            cmd_pattern_report(run)
    except MissingArtifactError as exc:
        print(f"rescal: {exc}", file=sys.stderr)
        return 2
    except (RescalError, OSError) as exc:
        print(f"rescal: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

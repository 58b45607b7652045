"""Command-line entry point: ``pestsim <command> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from collections import Counter
from dataclasses import replace

import numpy as np

from . import cmmformer as cm
from . import curation as cu
from . import features as ft
from .circuit import TuningError
from .config import ConfigError, RunConfig, load_config, parse_config, write_resolved
from .dropsim import SPECIES, build_reference_drops, read_truth_csv, simulate_campaign, write_truth_csv
from .experiments import bench_layout
from .metrics import (
    METRIC_FIELDS, ConfusionMatrix, classification_metrics, majority_baseline, write_metrics_csv,
    write_metrics_json,
)
from .optics import Layout, coverage_grid
from .records import read_jsonl, write_binary, write_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TUNING = 0, 2, 3, 4
COUNT_CLASSES = ("0", "1", "2")
RESOLVED = "resolved_config.txt"


class DataError(Exception):
    pass


def _config_from(path: str | None, fallback_dir: str | None = None) -> RunConfig:
    if path:
        return load_config(path)
    if fallback_dir and os.path.exists(os.path.join(fallback_dir, RESOLVED)):
        return load_config(os.path.join(fallback_dir, RESOLVED))
    return parse_config("")


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing input {path}")
    return path


# --- simulate -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    devices = cfg.devices()
    records, truth = simulate_campaign(cfg.campaign_config(), devices)
    refs = []
    for dev in devices:
        refs += build_reference_drops(dev, cfg.campaign.reference_drops, cfg.seed)
    write_jsonl(records, os.path.join(args.out, "records.jsonl"))
    write_binary(records, os.path.join(args.out, "records.bin"))
    write_jsonl(refs, os.path.join(args.out, "references.jsonl"))
    write_truth_csv(truth, os.path.join(args.out, "truth.csv"))
    write_resolved(cfg, args.out)
    print(f"{len(truth)} events, {len(records)} records, {len(refs)} reference drops -> {args.out}")
    return EXIT_OK


# --- curate -------------------------------------------------------------------


def cmd_curate(args) -> int:
    cfg = _config_from(args.config, args.inp)
    records = read_jsonl(_require(os.path.join(args.inp, "records.jsonl")))
    truth = read_truth_csv(_require(os.path.join(args.inp, "truth.csv")))
    refs = read_jsonl(_require(os.path.join(args.inp, "references.jsonl")))
    # the number of debris pieces in each cup is known from inspection
    debris = Counter(t["device_id"] for t in truth if t["scenario"] == "DebrisNoPest")
    ccfg = cfg.curation_config()
    logical, disp = cu.curate(records, dict(debris), ccfg)
    pools: dict[str, list] = {}
    for r in sorted(refs, key=lambda r: r.record_id):
        pools.setdefault(r.device_id, []).append(r.record_id)
    try:
        ds = cu.build_dataset(logical, disp, pools, ccfg)
    except cu.DataError as exc:
        raise DataError(str(exc)) from None
    os.makedirs(args.out, exist_ok=True)
    ds.write(os.path.join(args.out, "dataset.json"))
    shutil.copyfile(os.path.join(args.inp, "records.jsonl"), os.path.join(args.out, "records.jsonl"))
    shutil.copyfile(os.path.join(args.inp, "references.jsonl"), os.path.join(args.out, "references.jsonl"))
    summary = Counter(d.value for d in disp.values())
    _write_csv(os.path.join(args.out, "dispositions.csv"), ["disposition", "records"],
               [[d.value, summary.get(d.value, 0)] for d in cu.Disposition] + [["total", len(records)]])
    write_resolved(cfg, args.out)
    print(" ".join(f"{d.value}={summary.get(d.value, 0)}" for d in cu.Disposition) + f" total={len(records)}")
    return EXIT_OK


# --- dataset loading ------------------------------------------------------------


class Loaded:
    def __init__(self, data_dir: str):
        self.ds = cu.CuratedDataset.read(_require(os.path.join(data_dir, "dataset.json")))
        raw = {r.record_id: r for r in read_jsonl(_require(os.path.join(data_dir, "records.jsonl")))}
        refs = read_jsonl(_require(os.path.join(data_dir, "references.jsonl")))
        self.raw = raw
        self.pools = {}
        for dev, ids in self.ds.reference_pools.items():
            by_id = {r.record_id: r for r in refs if r.device_id == dev}
            self.pools[dev] = np.stack([by_id[i].as_array() for i in ids])

    def logical(self, rid: str) -> cu.LogicalRecord:
        parts = [self.raw[m] for m in self.ds.members[cu.base_id(rid)]]
        return cu.LogicalRecord(rid, parts[0].device_id, parts, cu.Disposition.PURE, parts[0].truth)

    def counting(self, split: str, oversampled: bool = True):
        if split == "train" and oversampled:
            ids = list(self.ds.counting_train)
        else:
            ids = sorted(k for k in self.ds.counting_set if self.ds.splits[k] == split and "#" not in k)
        if not ids:
            raise DataError(f"no counting records in split {split!r}")
        X = ft.feature_matrix([self.logical(i) for i in ids])
        y = np.array([self.ds.counting_set[i] for i in ids])
        devs = [self.ds.devices[i] for i in ids]
        return X, y, devs

    def species(self, split: str):
        ids = sorted(k for k in self.ds.species_set if self.ds.splits[k] == split)
        if not ids:
            raise DataError(f"no species records in split {split!r}")
        x = np.stack([self.raw[self.ds.members[i][0]].as_array() for i in ids])
        y = np.array([SPECIES.index(self.ds.species_set[i]) for i in ids])
        devs = [self.ds.devices[i] for i in ids]
        missing = sorted(set(devs) - set(self.pools))
        if missing:
            raise DataError(f"no reference pool for devices {missing}")
        return x, y, devs


def _model_cfg(cfg: RunConfig, ablate: str | None) -> cm.ModelConfig:
    m = cfg.model
    return m.ablated(ablate) if ablate else m


def _model_dir(args) -> str:
    if args.model:
        return args.model
    suffix = f"_no_{args.ablate}" if getattr(args, "ablate", None) else ""
    return os.path.join(args.data, f"model_{args.task}{suffix}")


# --- train ----------------------------------------------------------------------


def _save_counting(params: ft.CountingParams, path: str) -> None:
    blob = {k: np.asarray(getattr(params, k)).tolist() for k in ft.CountingParams.NAMES + ("mu", "sigma")}
    with open(path, "w") as fh:
        json.dump(blob, fh, sort_keys=True)
        fh.write("\n")


def _load_counting(path: str) -> ft.CountingParams:
    with open(_require(path)) as fh:
        blob = json.load(fh)
    return ft.CountingParams(**{k: np.asarray(v, dtype=float) for k, v in blob.items()})


def cmd_train(args) -> int:
    cfg = _config_from(args.config, args.data)
    data = Loaded(args.data)
    out = _model_dir(args)
    os.makedirs(out, exist_ok=True)
    if args.task == "counting":
        X, y, _ = data.counting("train")
        Xv, yv, _ = data.counting("val")
        c = cfg.counting
        params, hist = ft.counting_train(X, y, val_features=Xv, val_labels=yv, hidden=c.hidden, epochs=c.epochs,
                                         batch_size=c.batch_size, lr=c.lr, seed=cfg.seed)
        _save_counting(params, os.path.join(out, "counting_params.json"))
    else:
        mcfg = _model_cfg(cfg, args.ablate)
        x, y, devs = data.species("train")
        xv, yv, dv = data.species("val")
        params, hist = cm.train(x, y, devs, data.pools, mcfg, cfg.train_config(), val=(xv, yv, dv))
        cm.save_checkpoint(os.path.join(out, "species.pstm"), params, mcfg)
    with open(os.path.join(out, "history.json"), "w") as fh:
        json.dump(hist, fh, indent=1, sort_keys=True)
        fh.write("\n")
    write_resolved(cfg, out)
    last = hist[-1] if hist else {}
    print(f"trained {args.task} for {len(hist)} epochs; last loss {last.get('loss', float('nan')):.4f}"
          + (f", val acc {last['val_acc']:.4f}" if "val_acc" in last else "") + f" -> {out}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = _config_from(args.config, args.data)
    data = Loaded(args.data)
    mdir = _model_dir(args)
    if args.task == "counting":
        params = _load_counting(os.path.join(mdir, "counting_params.json"))
        X, y, devs = data.counting(args.split)
        pred = ft.counting_forward(X, params).argmax(axis=1)
        names = COUNT_CLASSES
        _, ytr, _ = data.counting("train", oversampled=False)
    else:
        ckpt = os.path.join(mdir, "species.pstm")
        if args.ablate and not args.model and not os.path.exists(ckpt):
            # no model trained without the component: knock it out of the full model
            mdir = os.path.join(args.data, "model_species")
            ckpt = os.path.join(mdir, "species.pstm")
            print(f"note: {args.ablate} knocked out of {ckpt} at inference", file=sys.stderr)
        params, mcfg = cm.load_checkpoint(_require(ckpt))
        if args.ablate:
            mcfg = mcfg.ablated(args.ablate)
        x, y, devs = data.species(args.split)
        pred = cm.predict(x, devs, data.pools, params, mcfg, seed=cfg.seed)
        names = SPECIES
        _, ytr, _ = data.species("train")
    out = args.out or mdir
    os.makedirs(out, exist_ok=True)
    tag = f"{args.task}_{args.split}" + (f"_no_{args.ablate}" if args.ablate else "")
    cmat = ConfusionMatrix.from_labels(y, pred, names)
    cmat.to_csv(os.path.join(out, f"confusion_{tag}.csv"))
    m = classification_metrics(cmat)
    m["majority_baseline"] = majority_baseline(ytr, y)
    m["n"] = int(len(y))
    write_metrics_json(m, os.path.join(out, f"metrics_{tag}.json"))
    print("  ".join(f"{k}={m[k]:.4f}" for k in METRIC_FIELDS) + f"  majority={m['majority_baseline']:.4f}  n={len(y)}")
    if args.per_device:
        rows = []
        devs = np.asarray(devs)
        for d in sorted(set(devs.tolist())):
            sel = devs == d
            row = {"device_id": d, **classification_metrics(ConfusionMatrix.from_labels(y[sel], pred[sel], names))}
            rows.append(row)
            print(f"{d}: " + "  ".join(f"{k}={row[k]:.4f}" for k in METRIC_FIELDS))
        write_metrics_csv(rows, os.path.join(out, f"per_device_{tag}.csv"), key_fields=("device_id",))
    write_resolved(cfg, out)
    return EXIT_OK


# --- bench-layout ---------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    b = cfg.bench
    rows = bench_layout(cfg.device_template(), seed=cfg.seed, n_devices=b.devices, drops=b.drops,
                        max_response_time=b.max_response_time, linearity_margin=b.linearity_margin)
    out = args.out or cfg.run.out_dir
    os.makedirs(out, exist_ok=True)
    header = ["combination", "device_id", "n", "eta_mean_mv", "eta_sd_mv", "r_r", "r_e"]
    _write_csv(os.path.join(out, "bench_layout.csv"), header, [[_fmt(r[h]) for h in header] for r in rows])
    write_resolved(cfg, out)
    for r in rows:
        if r["device_id"] == "all":
            print(f"{r['combination']:>14}: eta = {r['eta_mean_mv']:.2f} +/- {r['eta_sd_mv']:.2f} mV "
                  f"(R_r={r['r_r']:g}, R_e={r['r_e']:g})")
    return EXIT_OK


# --- report ---------------------------------------------------------------------


def _histogram_rows(name, values, groups, bins=20):
    values = np.asarray(values, dtype=float)
    edges = np.histogram_bin_edges(values, bins=bins)
    rows = []
    for g in sorted(set(groups)):
        sel = np.asarray([x == g for x in groups])
        counts, _ = np.histogram(values[sel], bins=edges)
        for k, c in enumerate(counts):
            rows.append([name, g, f"{edges[k]:.6g}", f"{edges[k + 1]:.6g}", int(c)])
    return rows


def pca_2d(X: np.ndarray) -> np.ndarray:
    """Projection on the two leading principal axes of standardized features.

    Axis signs are fixed so the largest-magnitude loading is positive.
    """
    Z = X - X.mean(axis=0)
    sd = Z.std(axis=0)
    Z = Z / np.where(sd > 0, sd, 1.0)
    _, _, vt = np.linalg.svd(Z, full_matrices=False)
    comps = vt[:2]
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    return Z @ (comps * signs[:, None]).T


def cmd_report(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    cfg = _config_from(args.config, args.inp)
    written = []
    man = os.path.join(args.inp, "dataset.json")
    if os.path.exists(man):
        data = Loaded(args.inp)
        ds = data.ds
        ids = sorted(k for k in ds.counting_set if "#" not in k)
        recs = [data.logical(i) for i in ids]
        disp = [ds.provenance[ds.members[i][0]].value for i in ids]
        F = np.stack([cu.shape_features(r) for r in recs])
        rows = []
        for k, name in enumerate(("duration", "peak", "energy")):
            rows += _histogram_rows(name, F[:, k], disp)
        pure = [k for k, i in enumerate(ids) if i in ds.species_set]
        sp = [ds.species_set[ids[k]] for k in pure]
        for k, name in enumerate(("duration", "peak", "energy")):
            rows += _histogram_rows(f"species_{name}", F[pure, k], sp)
        path = os.path.join(args.out, "feature_histograms.csv")
        _write_csv(path, ["feature", "group", "bin_lo", "bin_hi", "count"], rows)
        written.append(path)
        X = ft.feature_matrix(recs)
        emb = pca_2d(X)
        path = os.path.join(args.out, "embedding_pca.csv")
        _write_csv(path, ["record_id", "device_id", "disposition", "species", "pc1", "pc2"],
                   [[i, ds.devices[i], disp[k], ds.species_set.get(i, ""), f"{emb[k, 0]:.6f}", f"{emb[k, 1]:.6f}"]
                    for k, i in enumerate(ids)])
        written.append(path)
    for layout in Layout:
        geom = replace(cfg.geometry, layout=layout)
        tt, rr, hits = coverage_grid(geom, 0.05)
        path = os.path.join(args.out, f"coverage_{layout.value}.csv")
        _write_csv(path, ["t", "r", "pairs"], [[f"{t:.4f}", f"{r:.4f}", int(h)] for t, r, h in zip(tt, rr, hits)])
        written.append(path)
    metric_rows = []
    for root, dirs, files in os.walk(args.inp):
        dirs.sort()
        for f in sorted(files):
            if f.startswith("metrics_") and f.endswith(".json"):
                with open(os.path.join(root, f)) as fh:
                    m = json.load(fh)
                run = os.path.relpath(root, args.inp)
                metric_rows.append([run, f[len("metrics_"):-len(".json")]] + [f"{m[k]:.6f}" for k in METRIC_FIELDS])
    path = os.path.join(args.out, "metric_table.csv")
    _write_csv(path, ["run", "evaluation", *METRIC_FIELDS], metric_rows)
    written.append(path)
    write_resolved(cfg, args.out)
    for p in written:
        print(p)
    return EXIT_OK


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pestsim", description="Simulated grain-probe pest monitoring pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a seeded drop campaign and reference drops")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("curate", help="assign dispositions, build the labelled dataset")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="defaults to the resolved config of --in")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("bench-layout", help="compare layouts and circuits on small-pest drops")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="defaults to run.out_dir")
    p.set_defaults(func=cmd_bench)

    for name, func in (("train", cmd_train), ("eval", cmd_eval)):
        p = sub.add_parser(name, help=f"{name} the counting head or the species model")
        p.add_argument("--task", choices=("counting", "species"), required=True)
        p.add_argument("--data", required=True, help="output directory of 'curate'")
        p.add_argument("--model", help="model directory (default DATA/model_TASK)")
        p.add_argument("--config", help="defaults to the resolved config of --data")
        p.add_argument("--ablate", choices=cm.ABLATIONS)
        if name == "eval":
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
            p.add_argument("--per-device", action="store_true")
            p.add_argument("--out", help="defaults to the model directory")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="plot-ready CSV tables")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command in ("train", "eval") and args.task == "counting" and args.ablate:
        print("error: --ablate applies to the species model only", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TuningError as exc:
        print(f"infeasible tuning ({exc.constraint}): {exc}", file=sys.stderr)
        return EXIT_TUNING
    except (DataError, cu.DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

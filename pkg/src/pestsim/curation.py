"""Turns raw triggered records into the labelled counting and species sets."""

from __future__ import annotations

import enum
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .dropsim import SPECIES
from .records import WaveformRecord


class Disposition(str, enum.Enum):
    PURE = "Pure"
    MERGED = "Merged"
    DOUBLE_PEAK = "DoublePeak"
    DISCARDED_LOW_SUM = "DiscardedLowSum"
    DEBRIS = "Debris"


COUNT_OF = {Disposition.DEBRIS: 0, Disposition.PURE: 1, Disposition.MERGED: 1, Disposition.DOUBLE_PEAK: 2}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class CurationConfig:
    low_sum_threshold: float = 1700.0
    valley_depth: float = 0.25
    min_peak_gap: int = 10
    smooth_window: int = 3
    min_peak_height: float = 25.0
    sample_period: float = 200e-6
    buffer_len: int = 256
    split_ratio: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    paper_order: bool = False


@dataclass
class LogicalRecord:
    """A curated waveform: one raw record, or several merged back to back."""

    record_id: str
    device_id: str
    parts: list[WaveformRecord]
    disposition: Disposition
    truth: dict | None = None

    @property
    def ch1(self) -> np.ndarray:
        return np.concatenate([p.ch1 for p in self.parts])

    @property
    def ch2(self) -> np.ndarray:
        return np.concatenate([p.ch2 for p in self.parts])

    @property
    def source_ids(self) -> list[str]:
        return [p.record_id for p in self.parts]


def _dev(rec) -> np.ndarray:
    x = np.stack([np.asarray(rec.ch1, float), np.asarray(rec.ch2, float)])
    return x - np.median(x, axis=1, keepdims=True)


def deviation_sum(rec) -> float:
    return float(np.abs(_dev(rec)).sum())


def sum_filter(records, low_threshold: float):
    kept, discarded = [], []
    for rec in records:
        (discarded if deviation_sum(rec) < low_threshold else kept).append(rec)
    return kept, discarded


def _ordered(records):
    return sorted(records, key=lambda r: (r.device_id, r.seq))


def merge_consecutive(records, sample_period: float = 200e-6, buffer_len: int = 256) -> list:
    """Merge back-to-back records of one device.

    Two neighbours merge when the idle time between the end of the first and
    the start of the second is shorter than one DMA buffer. Returns a list of
    :class:`LogicalRecord`; merged ones carry :attr:`Disposition.MERGED`.
    """
    out: list[LogicalRecord] = []
    group: list[WaveformRecord] = []

    def flush():
        if group:
            disp = Disposition.MERGED if len(group) > 1 else Disposition.PURE
            rid = "+".join(r.record_id for r in group)
            out.append(LogicalRecord(rid, group[0].device_id, list(group), disp, group[0].truth))

    for rec in _ordered(records):
        if group:
            prev = group[-1]
            gap = rec.timestamp - (prev.timestamp + prev.n_samples * sample_period)
            if rec.device_id == prev.device_id and gap < buffer_len * sample_period - 1e-9:
                group.append(rec)
                continue
        flush()
        group = [rec]
    flush()
    return out


def peak_trace(rec, smooth_window: int = 3) -> np.ndarray:
    """Per-sample maximum over baseline-subtracted channels, box-smoothed."""
    tr = _dev(rec).max(axis=0)
    if smooth_window > 1:
        k = np.ones(smooth_window) / smooth_window
        tr = np.convolve(tr, k, mode="same")
    return tr


def count_peaks(trace, valley_depth: float = 0.25, min_gap: int = 10, min_height: float = 25.0) -> int:
    """Number of well-separated maxima, capped at 2.

    Two maxima count as distinct when they are at least ``min_gap`` samples
    apart and the lowest point between them sits below the smaller one by at
    least ``valley_depth`` times the larger one.
    """
    tr = np.asarray(trace, float)
    top = tr.max(initial=0.0)
    if top < min_height:
        return 0
    floor = max(min_height, valley_depth * top)
    interior = (tr[1:-1] >= tr[:-2]) & (tr[1:-1] > tr[2:])
    cand = np.flatnonzero(interior) + 1
    cand = [int(k) for k in cand if tr[k] >= floor]
    if tr.size and tr[0] >= floor and tr[0] > tr[1]:
        cand.insert(0, 0)
    if not cand:
        return 1
    for a_idx, a in enumerate(cand):
        for b in cand[a_idx + 1 :]:
            if b - a < min_gap:
                continue
            valley = tr[a : b + 1].min()
            if min(tr[a], tr[b]) - valley >= valley_depth * max(tr[a], tr[b]):
                return 2
    return 1


def extract_double_peak(records, cfg: CurationConfig = CurationConfig()):
    two, rest = [], []
    for rec in records:
        n = count_peaks(peak_trace(rec, cfg.smooth_window), cfg.valley_depth, cfg.min_peak_gap, cfg.min_peak_height)
        (two if n >= 2 else rest).append(rec)
    return two, rest


def shape_features(rec, smooth_window: int = 3) -> np.ndarray:
    """Duration (samples at or above half peak), peak and energy of a record."""
    tr = peak_trace(rec, smooth_window)
    peak = tr.max(initial=0.0)
    duration = float(np.count_nonzero(tr >= 0.5 * peak)) if peak > 0 else 0.0
    energy = float(np.sum(_dev(rec) ** 2))
    return np.array([duration, peak, energy])


def outlier_scores(records, smooth_window: int = 3) -> np.ndarray:
    if not records:
        return np.zeros(0)
    F = np.stack([shape_features(r, smooth_window) for r in records])
    med = np.median(F, axis=0)
    mad = 1.4826 * np.median(np.abs(F - med), axis=0)
    scale = np.where(mad > 0, mad, 1.0)
    return np.sqrt(np.sum(((F - med) / scale) ** 2, axis=1))


def remove_debris_outliers(records, n: int, smooth_window: int = 3):
    """Split off the ``n`` records farthest from the robust feature centre.

    Ties are broken by record id so the result does not depend on input order.
    """
    records = list(records)
    if n < 0 or n > len(records):
        raise ValueError(f"cannot remove {n} outliers from {len(records)} records")
    if n == 0:
        return [], records
    scores = outlier_scores(records, smooth_window)
    order = sorted(range(len(records)), key=lambda k: (-round(float(scores[k]), 9), records[k].record_id))
    drop = set(order[:n])
    debris = [records[k] for k in order[:n]]
    pure = [r for k, r in enumerate(records) if k not in drop]
    return debris, pure


def curate(records, debris_counts: dict | None = None, cfg: CurationConfig = CurationConfig()):
    """Assign every raw record exactly one disposition.

    ``debris_counts`` maps device id to the number of debris pieces found in
    that device's collection cup; outlier removal runs per device.
    Returns ``(logical_records, dispositions)`` where ``dispositions`` maps
    raw record id to :class:`Disposition`.
    """
    records = _ordered(records)
    kept, low = sum_filter(records, cfg.low_sum_threshold)
    disp = {r.record_id: Disposition.DISCARDED_LOW_SUM for r in low}
    logical = merge_consecutive(kept, cfg.sample_period, cfg.buffer_len)
    singles = [lr for lr in logical if lr.disposition is Disposition.PURE]
    out = [lr for lr in logical if lr.disposition is Disposition.MERGED]
    two, rest = extract_double_peak([lr.parts[0] for lr in singles], cfg)
    by_id = {lr.parts[0].record_id: lr for lr in singles}
    for rec in two:
        by_id[rec.record_id].disposition = Disposition.DOUBLE_PEAK
        out.append(by_id[rec.record_id])
    per_dev = defaultdict(list)
    for rec in rest:
        per_dev[rec.device_id].append(rec)
    for dev_id in sorted(per_dev):
        n = (debris_counts or {}).get(dev_id, 0)
        n = min(n, len(per_dev[dev_id]))
        debris, pure = remove_debris_outliers(per_dev[dev_id], n, cfg.smooth_window)
        for rec in debris:
            by_id[rec.record_id].disposition = Disposition.DEBRIS
            out.append(by_id[rec.record_id])
        for rec in pure:
            out.append(by_id[rec.record_id])
    for lr in out:
        for rid in lr.source_ids:
            disp[rid] = lr.disposition
    out.sort(key=lambda lr: lr.record_id)
    return out, disp


@dataclass
class CuratedDataset:
    counting_set: dict  # logical record id -> count label
    species_set: dict  # logical record id -> species name
    splits: dict  # logical record id -> train/val/test
    reference_pools: dict  # device id -> list of record ids
    provenance: dict  # raw record id -> Disposition
    counting_train: list = field(default_factory=list)  # oversampled train ids
    devices: dict = field(default_factory=dict)  # logical record id -> device id
    members: dict = field(default_factory=dict)  # logical record id -> raw ids

    def to_manifest(self) -> dict:
        return {
            "version": 1,
            "counting_set": dict(sorted(self.counting_set.items())),
            "species_set": dict(sorted(self.species_set.items())),
            "splits": dict(sorted(self.splits.items())),
            "reference_pools": {k: list(v) for k, v in sorted(self.reference_pools.items())},
            "provenance": {k: v.value for k, v in sorted(self.provenance.items())},
            "counting_train": list(self.counting_train),
            "devices": dict(sorted(self.devices.items())),
            "members": {k: list(v) for k, v in sorted(self.members.items())},
        }

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_manifest(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, path) -> "CuratedDataset":
        with open(path) as fh:
            m = json.load(fh)
        return cls(
            counting_set={k: int(v) for k, v in m["counting_set"].items()},
            species_set=m["species_set"],
            splits=m["splits"],
            reference_pools=m["reference_pools"],
            provenance={k: Disposition(v) for k, v in m["provenance"].items()},
            counting_train=m["counting_train"],
            devices=m["devices"],
            members=m["members"],
        )

    def ids(self, task: str, split: str) -> list[str]:
        source = self.counting_set if task == "counting" else self.species_set
        return [k for k in source if self.splits[k] == split]


def stratified_split(strata: dict, ratio=(0.6, 0.2, 0.2), seed: int = 0) -> dict:
    """Assign ids to train/val/test within each stratum, deterministically."""
    groups = defaultdict(list)
    for rid, s in strata.items():
        groups[s].append(rid)
    out = {}
    for key in sorted(groups):
        ids = sorted(groups[key])
        rng = np.random.default_rng([seed, sum(map(ord, str(key)))])
        ids = [ids[k] for k in rng.permutation(len(ids))]
        n = len(ids)
        n_train = int(round(ratio[0] * n))
        n_val = int(round(ratio[1] * n))
        for k, rid in enumerate(ids):
            out[rid] = "train" if k < n_train else ("val" if k < n_train + n_val else "test")
    return out


def oversample(ids: list, labels: dict, seed: int = 0) -> list:
    """Duplicate minority-class ids until every class matches the largest."""
    by_cls = defaultdict(list)
    for rid in sorted(ids):
        by_cls[labels[rid]].append(rid)
    target = max(len(v) for v in by_cls.values())
    rng = np.random.default_rng(seed)
    out = []
    for cls_ in sorted(by_cls):
        members = by_cls[cls_]
        out += members
        extra = target - len(members)
        picks = rng.integers(0, len(members), size=extra)
        out += [f"{members[k]}#dup{d + 1}" for d, k in enumerate(picks)]
    return out


def base_id(rid: str) -> str:
    return rid.split("#", 1)[0]


def build_dataset(logical, dispositions: dict, reference_pools: dict, cfg: CurationConfig = CurationConfig()):
    """Counting/species sets, a stratified 6:2:2 split and train oversampling.

    Oversampling duplicates minority counting classes in the training split
    only, unless ``cfg.paper_order`` asks for duplication before splitting.
    """
    counting, species, devices, members = {}, {}, {}, {}
    for lr in logical:
        counting[lr.record_id] = COUNT_OF[lr.disposition]
        devices[lr.record_id] = lr.device_id
        members[lr.record_id] = lr.source_ids
        sp = (lr.truth or {}).get("species")
        if lr.disposition is Disposition.PURE and sp in SPECIES:
            species[lr.record_id] = sp
    for k in (0, 1, 2):
        if k not in counting.values():
            raise DataError(f"counting class {k} is empty")
    for sp in SPECIES:
        if sp not in species.values():
            raise DataError(f"species class {sp} is empty")

    def stratum(rid):
        return f"sp:{species[rid]}" if rid in species else f"count:{counting[rid]}"

    if cfg.paper_order:
        pooled = oversample(list(counting), counting, cfg.seed)
        labels = {rid: counting[base_id(rid)] for rid in pooled}
        strata = {rid: stratum(base_id(rid)) for rid in pooled}
        splits = stratified_split(strata, cfg.split_ratio, cfg.seed)
        counting_train = sorted(r for r in pooled if splits[r] == "train")
        for rid in pooled:
            counting.setdefault(rid, labels[rid])
    else:
        splits = stratified_split({rid: stratum(rid) for rid in counting}, cfg.split_ratio, cfg.seed)
        train_ids = [r for r in counting if splits[r] == "train"]
        counting_train = oversample(train_ids, counting, cfg.seed)
        for rid in counting_train:
            splits.setdefault(rid, "train")
            counting.setdefault(rid, counting[base_id(rid)])
    for rid in list(counting):
        devices.setdefault(rid, devices.get(base_id(rid)))
        members.setdefault(rid, members.get(base_id(rid)))
    return CuratedDataset(
        counting_set=counting,
        species_set=species,
        splits=splits,
        reference_pools={d: list(v) for d, v in reference_pools.items()},
        provenance=dict(dispositions),
        counting_train=counting_train,
        devices=devices,
        members=members,
    )

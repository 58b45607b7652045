import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pestsim import curation as cu
from pestsim.device import DeviceConfig
from pestsim.dropsim import PROFILES, SPECIES, DropEvent, Scenario, synth_event
from pestsim.firmware import run_acquisition
from pestsim.records import WaveformRecord


def _rec(ch1, ch2=None, seq=0, dev="d", ts=0.0):
    ch2 = ch1 if ch2 is None else ch2
    return WaveformRecord(dev, seq, 0, ch1, ch2, timestamp=ts)


def _scenario_records(scenario, seed, species="Rd", seq=0, dev=DeviceConfig(), ts=0.0):
    rng = np.random.default_rng(seed)
    t, r = rng.uniform(-1.2, 1.2, size=2)
    ev = DropEvent(PROFILES[species], t, r, 1.0, scenario, seed=seed)
    stream, _ = synth_event(ev, dev)
    recs = run_acquisition(stream, dev.trigger, dev.device_id, seq_start=seq, start_time=ts)
    return recs


def test_sum_filter_examples():
    flat = _rec(np.full(128, 2000))
    pulse = np.full(128, 2000)
    pulse[40:60] = 4095
    kept, dropped = cu.sum_filter([flat, _rec(pulse, seq=1)], 1700)
    assert dropped == [flat] and len(kept) == 1
    kept, dropped = cu.sum_filter([flat], 0)
    assert kept == [flat] and dropped == []


def test_merge_examples():
    dt = 200e-6
    a = _rec(np.zeros(128), seq=0, ts=0.0)
    far = _rec(np.zeros(128), seq=1, ts=2 * 256 * dt)
    out = cu.merge_consecutive([a, far], dt)
    assert [lr.disposition for lr in out] == [cu.Disposition.PURE] * 2
    assert cu.merge_consecutive([a], dt)[0].source_ids == [a.record_id]
    recs = _scenario_records(Scenario.SPAN_TWO_CYCLES, 3)
    assert len(recs) == 2 and recs[1].seq == recs[0].seq + 1
    merged = cu.merge_consecutive(recs, dt)
    assert len(merged) == 1 and merged[0].disposition is cu.Disposition.MERGED
    assert merged[0].ch1.size == 256


def test_merge_ignores_other_devices():
    dt = 200e-6
    a = _rec(np.zeros(128), seq=0, dev="a", ts=0.0)
    b = _rec(np.zeros(128), seq=0, dev="b", ts=128 * dt)
    assert len(cu.merge_consecutive([a, b], dt)) == 2


def test_double_peak_examples():
    for seed in range(5):
        (double,) = _scenario_records(Scenario.CONSECUTIVE_DOUBLE, seed)
        (single,) = _scenario_records(Scenario.NORMAL_SINGLE, seed)
        two, rest = cu.extract_double_peak([double, single])
        assert two == [double] and rest == [single]
    two, rest = cu.extract_double_peak([_rec(np.full(128, 1500))])
    assert two == []


def test_count_peaks_rules():
    x = np.zeros(80)
    x[20], x[50] = 100, 80
    assert cu.count_peaks(x, smooth := 0.25, 10) == 2
    x[35] = 70  # shallow valley between the two maxima
    x[21:50] = 70
    assert cu.count_peaks(x, 0.25, 10) == 1
    y = np.zeros(80)
    y[20], y[25] = 100, 90  # too close
    assert cu.count_peaks(y, 0.25, 10) == 1
    assert cu.count_peaks(np.zeros(10)) == 0


def test_remove_outliers_examples():
    recs = [_rec(np.full(128, 2000), seq=k) for k in range(4)]
    debris, pure = cu.remove_debris_outliers(recs, 1)
    assert [r.seq for r in debris] == [0]
    assert cu.remove_debris_outliers(recs, 0) == ([], recs)
    with pytest.raises(ValueError):
        cu.remove_debris_outliers(recs, 5)


def test_debris_found_among_single_pests():
    found = 0
    for s in range(20):
        singles = []
        for k in range(50):
            singles += _scenario_records(Scenario.NORMAL_SINGLE, 1000 * s + k, species=SPECIES[k % 5], seq=k)
        debris = _scenario_records(Scenario.DEBRIS_NO_PEST, 1000 * s + 99, seq=50)
        removed, _ = cu.remove_debris_outliers(singles + debris, 1)
        found += removed[0].seq == 50
    assert found / 20 >= 0.9


def _curated(campaign):
    recs, truth = campaign
    debris = collections.Counter(t["device_id"] for t in truth if t["scenario"] == "DebrisNoPest")
    return recs, truth, cu.curate(recs, dict(debris))


def test_partition_conservation(small_campaign):
    recs, _, (logical, disp) = _curated(small_campaign)
    assert set(disp) == {r.record_id for r in recs}
    counts = collections.Counter(disp.values())
    assert sum(counts.values()) == len(recs)
    members = [rid for lr in logical for rid in lr.source_ids]
    low = [rid for rid, d in disp.items() if d is cu.Disposition.DISCARDED_LOW_SUM]
    assert sorted(members + low) == sorted(disp)


def test_order_insensitive(small_campaign):
    recs, truth = small_campaign
    _, _, (_, disp) = _curated(small_campaign)
    shuffled = [recs[k] for k in np.random.default_rng(1).permutation(len(recs))]
    _, _, (_, disp2) = _curated((shuffled, truth))
    assert disp == disp2


def _dataset(campaign, **kw):
    recs, truth, (logical, disp) = _curated(campaign)
    pools = {"pm1": ["pm1-900000"], "pm2": ["pm2-900000"]}
    return cu.build_dataset(logical, disp, pools, cu.CurationConfig(**kw))


def test_split_invariants(small_campaign):
    ds = _dataset(small_campaign)
    originals = [k for k in ds.counting_set if "#" not in k]
    assert collections.Counter(ds.splits[k] for k in originals).keys() == {"train", "val", "test"}
    assert all(ds.splits[k] == "train" for k in ds.counting_set if "#" in k)
    train = collections.Counter(ds.counting_set[k] for k in ds.counting_train)
    assert len(set(train.values())) == 1
    assert set(ds.species_set) <= set(ds.counting_set)
    assert _dataset(small_campaign).splits == ds.splits


def test_stratified_species_frequencies():
    strata = {f"r{k}": SPECIES[k % 5] for k in range(1000)}
    split = cu.stratified_split(strata, seed=4)
    full = collections.Counter(strata.values())
    for part in ("train", "val", "test"):
        ids = [k for k, v in split.items() if v == part]
        freq = collections.Counter(strata[k] for k in ids)
        for sp in SPECIES:
            assert abs(freq[sp] / len(ids) - full[sp] / 1000) <= 0.02
    assert collections.Counter(split.values()) == {"train": 600, "val": 200, "test": 200}


def test_oversampling_equalizes_scaled_class_counts():
    labels = {**{f"z{k}": 0 for k in range(14)}, **{f"o{k}": 1 for k in range(124)},
              **{f"t{k}": 2 for k in range(10)}}
    out = cu.oversample(list(labels), labels, seed=0)
    c = collections.Counter(labels[cu.base_id(r)] for r in out)
    assert c == {0: 124, 1: 124, 2: 124}
    assert len(set(out)) == len(out)


def test_paper_order_flag_leaks_duplicates(small_campaign):
    ds = _dataset(small_campaign, paper_order=True)
    dup_splits = {ds.splits[k] for k in ds.splits if "#" in k}
    assert dup_splits - {"train"}


def test_empty_class_is_an_error(small_campaign):
    recs, truth, (logical, disp) = _curated(small_campaign)
    no_debris = [lr for lr in logical if lr.disposition is not cu.Disposition.DEBRIS]
    with pytest.raises(cu.DataError):
        cu.build_dataset(no_debris, disp, {})


def test_manifest_roundtrip(small_campaign, tmp_path):
    ds = _dataset(small_campaign)
    ds.write(tmp_path / "m.json")
    back = cu.CuratedDataset.read(tmp_path / "m.json")
    assert back.to_manifest() == ds.to_manifest()


@settings(max_examples=30, deadline=None)
@given(ratio=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_split_is_a_partition(ratio, seed):
    strata = {f"r{k}": k % 3 for k in range(60)}
    r = (ratio, (1 - ratio) / 2, (1 - ratio) / 2)
    split = cu.stratified_split(strata, r, seed)
    assert set(split) == set(strata)
    assert set(split.values()) <= {"train", "val", "test"}

import csv
import json
import os

import pytest

from pestsim.cli import main

SMALL = """
run.seed = 3
campaign.n_events = 10
campaign.reference_drops = 6
device.n_devices = 2
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One smoke-sized run of every command, shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = os.path.abspath("configs/smoke.cfg")
    sim, cur = str(root / "sim"), str(root / "cur")
    codes = [
        main(["simulate", "--config", cfg, "--out", sim]),
        main(["curate", "--in", sim, "--out", cur]),
        main(["train", "--task", "counting", "--data", cur]),
        main(["eval", "--task", "counting", "--data", cur, "--per-device"]),
        main(["train", "--task", "species", "--data", cur]),
        main(["eval", "--task", "species", "--data", cur, "--per-device"]),
        main(["eval", "--task", "species", "--data", cur, "--ablate", "cmm"]),
        main(["report", "--in", cur, "--out", str(root / "rep")]),
    ]
    return root, codes


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_all_commands_succeed(pipeline):
    _, codes = pipeline
    assert codes == [0] * len(codes)


def test_simulate_counts_and_creates_dir(tmp_path):
    (tmp_path / "small.cfg").write_text(SMALL)
    out = tmp_path / "a" / "b"
    assert main(["simulate", "--config", str(tmp_path / "small.cfg"), "--out", str(out)]) == 0
    assert len(_rows(out / "truth.csv")) == 10
    assert (out / "resolved_config.txt").exists()


def test_simulate_is_byte_identical(tmp_path):
    (tmp_path / "small.cfg").write_text(SMALL)
    for d in ("x", "y"):
        main(["simulate", "--config", str(tmp_path / "small.cfg"), "--out", str(tmp_path / d)])
    for name in sorted(os.listdir(tmp_path / "x")):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_curation_summary_conserves_records(pipeline):
    root, _ = pipeline
    rows = {r["disposition"]: int(r["records"]) for r in _rows(root / "cur" / "dispositions.csv")}
    total = rows.pop("total")
    with open(root / "sim" / "records.jsonl") as fh:
        assert total == sum(1 for _ in fh) == sum(rows.values())


def test_counting_beats_majority(pipeline):
    root, _ = pipeline
    m = json.loads((root / "cur" / "model_counting" / "metrics_counting_test.json").read_text())
    assert m["accuracy"] >= m["majority_baseline"]


def test_per_device_rows(pipeline):
    root, _ = pipeline
    rows = _rows(root / "cur" / "model_species" / "per_device_species_test.csv")
    assert [r["device_id"] for r in rows] == ["pm1", "pm2"]


def test_ablation_metrics_written(pipeline):
    root, _ = pipeline
    m = json.loads((root / "cur" / "model_species" / "metrics_species_test_no_cmm.json").read_text())
    assert 0.0 <= m["accuracy"] <= 1.0


def test_report_tables(pipeline):
    root, _ = pipeline
    names = sorted(os.listdir(root / "rep"))
    assert {"feature_histograms.csv", "embedding_pca.csv", "metric_table.csv"} <= set(names)
    for n in names:
        if n.endswith(".csv"):
            assert len((root / "rep" / n).read_text().splitlines()) > 1


def test_report_is_idempotent(pipeline, tmp_path):
    root, _ = pipeline
    assert main(["report", "--in", str(root / "cur"), "--out", str(tmp_path)]) == 0
    for n in os.listdir(tmp_path):
        assert (tmp_path / n).read_bytes() == (root / "rep" / n).read_bytes()


def test_exit_codes(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("campaign.bogus = 1\n")
    assert main(["simulate", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 2
    assert "campaign.bogus" in capsys.readouterr().err
    assert main(["curate", "--in", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]) == 3
    (tmp_path / "tight.cfg").write_text("bench.max_response_time = 1e-9\nbench.drops = 1\n")
    assert main(["bench-layout", "--config", str(tmp_path / "tight.cfg"), "--out", str(tmp_path / "b")]) == 4
    assert main(["eval", "--task", "counting", "--data", str(tmp_path), "--ablate", "cmm"]) == 2


def test_seed_env_override(tmp_path, monkeypatch):
    (tmp_path / "small.cfg").write_text(SMALL)
    monkeypatch.setenv("PESTSIM_SEED", "17")
    main(["simulate", "--config", str(tmp_path / "small.cfg"), "--out", str(tmp_path / "s")])
    assert "run.seed = 17" in (tmp_path / "s" / "resolved_config.txt").read_text()

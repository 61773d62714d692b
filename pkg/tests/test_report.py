import json

import numpy as np
import pytest

from catw import report as R
from catw.metrics import COLUMNS, MetricTable


def _table(seed=0):
    t = MetricTable(seed=seed, corpus_digest="d" * 8)
    for i, attack in enumerate(("recon", "encoder_away")):
        t.add(attack, "none", d_a=0.3 + i, d_r=0.1, psnr=30.0 - i, ssim=0.9)
        t.add(attack, "both", d_a_cat=0.12 + 0.01 * i, psnr=31.0)
    return t


def _learn():
    t = MetricTable(seed=0, corpus_digest="d" * 8)
    t.add("recon", "full", s_c=0.01, s_r=0.02, s_a=0.015)
    t.add("encoder_away", "full", s_c=0.01, s_r=0.02, s_a=0.04, s_a_cat=0.012)
    return t


def _report(**tables):
    pca = {"points": [{"group": g, "x": float(i), "y": float(i % 3)} for i, g in enumerate("aabbcc")], "explained": [0.7, 0.2]}
    return R.build_report("unit", 0, "cfg", "corp", tables, pca=pca)


def test_empty_table_gives_header_only_csv_and_valid_json(tmp_path):
    empty = MetricTable(seed=1, corpus_digest="x")
    text = R.table_csv(empty)
    assert text == ",".join(["attack", "setting", *COLUMNS, "seed", "corpus_digest"]) + "\n"
    doc = R.build_report("empty", 1, "c", "x", {"distortion": empty})
    written = R.make_report(doc, tmp_path)
    loaded = R.load_report(tmp_path / "report.json")
    assert loaded["tables"]["distortion"]["rows"] == []
    assert sorted(p.name for p in written) == ["distortion.csv", "report.json"]


def test_csv_rows_and_provenance():
    lines = R.table_csv(_table(seed=4)).splitlines()
    assert len(lines) == 5
    header = lines[0].split(",")
    row = dict(zip(header, lines[1].split(",")))
    assert row["attack"] == "recon" and row["seed"] == "4" and row["corpus_digest"] == "d" * 8
    assert float(row["d_a"]) == 0.3 and row["s_c"] == ""


def test_json_roundtrip_is_byte_identical():
    doc = _report(distortion=_table(), learnability=_learn())
    text = R.report_json(doc)
    again = R.report_json(R.roundtrip(json.loads(text)))
    assert again == text


def test_schema_is_checked(tmp_path):
    (tmp_path / "r.json").write_text(json.dumps({"schema": "report/0"}))
    with pytest.raises(ValueError, match="schema"):
        R.load_report(tmp_path / "r.json")


def test_plots_are_emitted_and_reproducible(tmp_path):
    doc = _report(distortion=_table(), learnability=_learn())
    a = R.make_report(doc, tmp_path / "a")
    b = R.make_report(doc, tmp_path / "b")
    names = sorted(p.name for p in a)
    assert {"distances_synthetic.png", "ratios.png", "pca.png"} <= set(names)
    for pa, pb in zip(sorted(a), sorted(b)):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_rank_curve_plot(tmp_path):
    sweep = MetricTable(seed=0, corpus_digest="d", columns=("rank", "gap_cat"))
    for r in (4, 8, 16):
        sweep.add("recon", f"r{r}", rank=r, gap_cat=1.0 / r)
    files = R.emit_plots(_report(distortion=_table(), rank_sweep=sweep), tmp_path)
    assert (tmp_path / "rank_sweep.png") in files


def test_empty_report_writes_no_plots(tmp_path):
    assert R.emit_plots(R.build_report("e", 0, "c", "x", {}), tmp_path) == []
    assert list(tmp_path.iterdir()) == []


def test_nan_cells_survive_roundtrip():
    t = MetricTable(seed=0, corpus_digest="d")
    t.add("recon", "none", d_a=float("nan"))
    doc = R.build_report("n", 0, "c", "d", {"t": t})
    back = json.loads(R.report_json(doc))
    assert np.isnan(back["tables"]["t"]["rows"][0]["d_a"])

import json
import shutil

import pytest

from catw import pipeline as P
from catw.pipeline import StageFailure, ThreatModelViolation, load_manifest, output_digests, run_pipeline
from tiny import tiny_config


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    entry = run_pipeline(tiny_config(), root)
    return root, entry


def _status(entry):
    return {s["name"]: s["status"] for s in entry["stages"]}


def test_all_stages_run_and_report_written(tiny_run):
    root, entry = tiny_run
    assert _status(entry) == {s: "ran" for s in P.STAGES}
    rep = root / "stages" / "report"
    for name in ("report.json", "distortion.csv", "learnability.csv", "customize.csv", "rank_sweep.csv", "distances_synthetic.png"):
        assert (rep / name).exists(), name
    for st in entry["stages"]:
        assert st["seconds"] >= 0 and st["outputs"]
    assert entry["thresholds"]["learnability_widen"] == 0.5


def test_rerun_is_fully_cached(tiny_run, tmp_path):
    root, entry = tiny_run
    again = run_pipeline(tiny_config(), root)
    assert set(_status(again).values()) == {"cached"}
    assert output_digests(again) == output_digests(entry)
    assert len(load_manifest(root)["runs"]) >= 2


def test_manifest_digests_match_files(tiny_run):
    from catw.seeding import digest_file

    root, entry = tiny_run
    for rel, dig in output_digests(entry).items():
        assert digest_file(root / rel) == dig


def test_adversary_stages_only_read_allowed_artifacts(tiny_run):
    _, entry = tiny_run
    for st in entry["stages"]:
        if st["name"] in P.ALLOWED_READS:
            assert st["inputs"]
            for rel in st["inputs"]:
                assert rel.startswith(tuple(a + "/" for a in P.ALLOWED_READS[st["name"]])), rel
                assert "corpus" not in rel.split("/")[1]


def test_clean_split_read_is_a_violation(tiny_run):
    root, _ = tiny_run
    for stage in ("cat", "customize"):
        ctx = P.StageContext(stage, root, 0, tiny_config())
        with pytest.raises(ThreatModelViolation):
            ctx.read_corpus(root / "stages" / "corpus" / "eval" / "reference")
    # the defender-side stages are unrestricted
    P.StageContext("diagnose", root, 0, tiny_config()).check_read(root / "stages" / "corpus" / "eval" / "reference")


def test_config_edit_invalidates_downstream_only(tiny_run, tmp_path):
    root, entry = tiny_run
    work = tmp_path / "w"
    shutil.copytree(root, work)
    cat_edit = run_pipeline(tiny_config("[cat]\nlr = 2e-4\n"), work)
    ran = {n for n, s in _status(cat_edit).items() if s == "ran"}
    assert ran == {"cat", "customize", "report"}
    ae_edit = run_pipeline(tiny_config("[cat]\nlr = 2e-4\n[ae]\nlr = 2e-3\n"), work)
    ran = {n for n, s in _status(ae_edit).items() if s == "ran"}
    assert ran == set(P.STAGES) - {"corpus"}


def test_failure_is_recorded_and_artifacts_kept(tiny_run, tmp_path, monkeypatch):
    root, _ = tiny_run
    work = tmp_path / "f"
    shutil.copytree(root, work)

    def boom(ctx):
        raise RuntimeError("injected")

    monkeypatch.setitem(P.RUNNERS, "cat", boom)
    with pytest.raises(StageFailure) as info:
        run_pipeline(tiny_config(), work, force=True, stages=["attack", "cat", "report"])
    assert info.value.stage == "cat"
    last = load_manifest(work)["runs"][-1]
    assert _status(last) == {"attack": "ran", "cat": "failed"}
    assert "injected" in last["stages"][-1]["error"]
    assert (work / "stages" / "attack" / "stage.json").exists()
    assert (work / "stages" / "train-ae" / "stage.json").exists()


def test_stage_subset_uses_existing_upstream_keys(tiny_run, tmp_path):
    root, entry = tiny_run
    work = tmp_path / "s"
    shutil.copytree(root, work)
    sub = run_pipeline(tiny_config(), work, stages=["report"])
    assert _status(sub) == {"report": "cached"}


def test_manifest_is_append_only(tiny_run, tmp_path):
    root, _ = tiny_run
    before = json.loads((root / "manifest.json").read_text())["runs"]
    run_pipeline(tiny_config(), root, stages=["corpus"])
    after = json.loads((root / "manifest.json").read_text())["runs"]
    assert after[: len(before)] == before and len(after) == len(before) + 1

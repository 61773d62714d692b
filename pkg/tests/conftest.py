"""Session fixtures that run the full presets once and share the outputs.

Set CATW_TEST_RUNS to a directory to keep the runs between sessions; cached
stages are then reused.  Without it everything lives in a pytest temp dir.
"""
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import pytest

from catw.config import preset
from catw.pipeline import load_manifest, run_pipeline


@dataclass
class Run:
    root: Path
    entry: dict
    report: dict  # file name -> bytes, captured right after the run

    @property
    def stages(self) -> Path:
        return self.root / "stages"

    def stage(self, name: str) -> dict:
        return next(s for s in self.entry["stages"] if s["name"] == name)

    def seconds(self, name: str) -> float:
        """Wall-clock of the run that produced the stage's current outputs."""
        key = self.stage(name)["key"]
        for run in reversed(load_manifest(self.root)["runs"]):
            for s in run["stages"]:
                if s["name"] == name and s["key"] == key and s["status"] == "ran":
                    return s["seconds"]
        raise LookupError(name)


def _snapshot(root: Path) -> dict:
    rep = root / "stages" / "report"
    return {p.name: p.read_bytes() for p in sorted(rep.iterdir()) if p.is_file() and p.name != "stage.json"}


def _run(root: Path, name: str, force: bool = False) -> Run:
    entry = run_pipeline(preset(name), root, force=force)
    return Run(root, entry, _snapshot(root))


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory) -> Path:
    env = os.environ.get("CATW_TEST_RUNS")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.mktemp("runs")


@pytest.fixture(scope="session")
def fig3(runs_root) -> Run:
    return _run(runs_root / "fig3-a", "fig3-desk")


@pytest.fixture(scope="session")
def fig3_repeat(runs_root) -> Run:
    """An independent from-scratch run with the same seed."""
    return _run(runs_root / "fig3-b", "fig3-desk", force=True)


def _derived(runs_root: Path, base: Run, name: str) -> Run:
    root = runs_root / name
    if not root.exists():
        shutil.copytree(base.root, root)
    return _run(root, name)


@pytest.fixture(scope="session")
def fig4(runs_root, fig3) -> Run:
    return _derived(runs_root, fig3, "fig4-desk")


@pytest.fixture(scope="session")
def rank_sweep(runs_root, fig3) -> Run:
    return _derived(runs_root, fig3, "rank-sweep")

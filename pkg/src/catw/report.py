"""Report assembly: CSV tables, a versioned JSON mirror and static plots."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from pathlib import Path

import numpy as np

from catw.metrics import MetricTable, sr_range

log = logging.getLogger(__name__)

SCHEMA = "report/1"


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_csv(table: MetricTable) -> str:
    """Comma-separated text with a mandatory header row; empty tables give the header only."""
    extra = [k for k in ("method", "note") if any(k in r for r in table.rows)]
    header = ["attack", "setting", *extra, *table.columns, "seed", "corpus_digest"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in table.rows:
        w.writerow([_cell(r.get(k)) for k in header])
    return buf.getvalue()


def report_json(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=True) + "\n"


def build_report(name: str, seed: int, config_digest: str, corpus_digest: str, tables: dict[str, MetricTable], **extra) -> dict:
    doc = {
        "schema": SCHEMA,
        "name": name,
        "seed": seed,
        "config_digest": config_digest,
        "corpus_digest": corpus_digest,
        "tables": {k: t.to_dict() for k, t in tables.items()},
    }
    doc.update(extra)
    return doc


def tables_of(report: dict) -> dict[str, MetricTable]:
    return {k: MetricTable.from_dict(v) for k, v in report.get("tables", {}).items()}


def roundtrip(report: dict) -> dict:
    """JSON -> tables -> JSON; used to check the mirror is lossless."""
    doc = dict(report)
    doc["tables"] = {k: t.to_dict() for k, t in tables_of(report).items()}
    return doc


def make_report(report: dict, out_dir, plots: bool = True) -> list[Path]:
    """Write ``report.json``, one CSV per table and (optionally) the plots; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "report.json"
    _atomic_write(path, report_json(report).encode())
    written.append(path)
    for name, table in tables_of(report).items():
        path = out / f"{name}.csv"
        _atomic_write(path, table_csv(table).encode("utf-8"))
        written.append(path)
    if plots:
        written.extend(emit_plots(report, out))
    return written


def load_report(path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"unsupported report schema {doc.get('schema')!r}")
    return doc


# ------------------------------------------------------------------ plots


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update({"svg.hashsalt": "catw", "font.size": 8})
    return plt


def _save(plt, fig, path: Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    _atomic_write(path, buf.getvalue())
    return path


def emit_plots(report: dict, out_dir) -> list[Path]:
    """Distance bars, ratio bands and a PCA scatter; nothing is drawn for an empty report."""
    out = Path(out_dir)
    tables = tables_of(report)
    dist = tables.get("distortion")
    files: list[Path] = []
    if dist is None or not dist.rows:
        log.info("report has no distortion rows; no plots written")
        return files
    plt = _figure()
    files.append(_distance_bars(plt, dist, out / f"distances_{report.get('dataset', 'synthetic')}.png"))
    learn = tables.get("learnability")
    if learn is not None and learn.rows:
        files.append(_ratio_bands(plt, learn, out / "ratios.png"))
    pca = report.get("pca")
    if pca and pca.get("points"):
        files.append(_pca_scatter(plt, pca, out / "pca.png"))
    sweep = tables.get("rank_sweep")
    if sweep is not None and sweep.rows:
        files.append(_rank_curve(plt, sweep, out / "rank_sweep.png"))
    return files


def _distance_bars(plt, table: MetricTable, path: Path) -> Path:
    attacks = list(dict.fromkeys(r["attack"] for r in table.rows))
    settings = [s for s in dict.fromkeys(r["setting"] for r in table.rows) if s != "none"]
    series = [("d_r", "none", "d_r"), ("d_a", "none", "d_a")] + [(f"d_a_cat {s}", s, "d_a_cat") for s in settings]
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(attacks)), 3.2))
    width = 0.8 / len(series)
    x = np.arange(len(attacks))
    for j, (label, setting, col) in enumerate(series):
        vals = []
        for a in attacks:
            try:
                v = table.get(a, setting).get(col)
            except KeyError:
                v = None
            vals.append(np.nan if v is None else v)
        ax.bar(x + (j - (len(series) - 1) / 2) * width, vals, width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(attacks, rotation=30, ha="right")
    ax.set_ylabel("latent MAE to clean")
    ax.legend(fontsize=6, ncol=2)
    fig.tight_layout()
    return _save(plt, fig, path)


def _ratio_bands(plt, table: MetricTable, path: Path) -> Path:
    modes = list(dict.fromkeys(r["setting"] for r in table.rows))
    fig, axes = plt.subplots(1, len(modes), figsize=(4 * len(modes), 3), squeeze=False)
    for ax, mode in zip(axes[0], modes):
        rows = [r for r in table.rows if r["setting"] == mode]
        s_c, s_r = rows[0]["s_c"], rows[0]["s_r"]
        lo, hi = sr_range(s_c, s_r)
        ax.axhspan(lo, hi, color="0.85", label="s_r range")
        ax.axhline(s_c, color="k", lw=0.8, label="s_c")
        x = np.arange(len(rows))
        ax.plot(x, [r["s_a"] for r in rows], "o", label="s_a")
        if any(r.get("s_a_cat") is not None for r in rows):
            ax.plot(x, [np.nan if r.get("s_a_cat") is None else r["s_a_cat"] for r in rows], "s", label="s_a cat")
        ax.set_xticks(x)
        ax.set_xticklabels([r["attack"] for r in rows], rotation=30, ha="right")
        ax.set_title(mode)
        ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(plt, fig, path)


def _pca_scatter(plt, pca: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 4))
    groups = list(dict.fromkeys(p["group"] for p in pca["points"]))
    for g in groups:
        pts = np.array([[p["x"], p["y"]] for p in pca["points"] if p["group"] == g])
        ax.scatter(pts[:, 0], pts[:, 1], s=10, label=g)
    ev = pca.get("explained", [0, 0])
    ax.set_xlabel(f"PC1 ({ev[0]:.2f})")
    ax.set_ylabel(f"PC2 ({ev[1]:.2f})")
    ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(plt, fig, path)


def _rank_curve(plt, table: MetricTable, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4, 3))
    for attack in dict.fromkeys(r["attack"] for r in table.rows):
        rows = sorted((r for r in table.rows if r["attack"] == attack), key=lambda r: r["rank"])
        ax.plot([r["rank"] for r in rows], [r["gap_cat"] for r in rows], "o-", label=attack)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("adapter rank")
    ax.set_ylabel("mean |d_a_cat - d_r|")
    ax.legend(fontsize=6)
    fig.tight_layout()
    return _save(plt, fig, path)

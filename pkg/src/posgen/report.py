"""Report writing: tab-separated metric records, a text table, matplotlib
figures, and greyscale frame strips for eyeballing latents."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pipeline import MetricRecord, RunReport  # noqa: E402
from .tensorio import Record, write_collection  # noqa: E402

COLUMNS = ("metric", "arm", "value", "config_hash", "param", "param_value")


def format_records(records: Sequence[MetricRecord]) -> str:
    lines = ["\t".join(COLUMNS)]
    for r in records:
        lines.append("\t".join([r.name, r.arm, repr(float(r.value)), r.config_hash, r.param, r.param_value]))
    return "\n".join(lines) + "\n"


def parse_records(text: str) -> list[MetricRecord]:
    rows = [ln.split("\t") for ln in text.splitlines() if ln.strip()]
    if not rows or tuple(rows[0]) != COLUMNS:
        raise ValueError("not a metric record file")
    return [MetricRecord(r[0], r[1], float(r[2]), r[3], r[4], r[5]) for r in rows[1:]]


def format_table(records: Sequence[MetricRecord]) -> str:
    """Rows are arms (or sweep points), columns are metrics."""
    names = list(dict.fromkeys(r.name for r in records))
    rows: dict[str, dict[str, float]] = {}
    for r in records:
        key = r.arm if not r.param else f"{r.arm} {r.param}={r.param_value}"
        rows.setdefault(key, {})[r.name] = r.value
    width = max([len("arm")] + [len(k) for k in rows])
    head = "arm".ljust(width) + "".join(f"{n:>14}" for n in names)
    out = [head, "-" * len(head)]
    for key, vals in rows.items():
        cells = "".join(f"{vals[n]:>14.4f}" if n in vals else f"{'':>14}" for n in names)
        out.append(key.ljust(width) + cells)
    return "\n".join(out) + "\n"


def plot_arms(records: Sequence[MetricRecord], path: str | os.PathLike) -> Path:
    recs = [r for r in records if not r.param]
    names = list(dict.fromkeys(r.name for r in recs))
    arms = list(dict.fromkeys(r.arm for r in recs))
    fig, axes = plt.subplots(1, len(names), figsize=(3.2 * len(names), 3.0), squeeze=False)
    for ax, name in zip(axes[0], names):
        vals = [next((r.value for r in recs if r.arm == a and r.name == name), np.nan) for a in arms]
        ax.bar(range(len(arms)), vals, color="0.55")
        ax.set_xticks(range(len(arms)))
        ax.set_xticklabels(arms, rotation=30, ha="right", fontsize=8)
        ax.set_title(name, fontsize=10)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_sweep(records: Sequence[MetricRecord], param: str, metric: str, path: str | os.PathLike) -> Path:
    """Metric against the swept parameter; an infinite eta is drawn at the right edge."""
    recs = [r for r in records if r.param == param and r.name == metric]
    finite = [float(r.param_value) for r in recs if r.param_value != "inf"]
    top = max(finite) if finite else 1.0
    xs, labels = [], []
    for r in recs:
        if r.param_value == "inf":
            xs.append(top * 1.5 if top > 0 else 1.0)
            labels.append("∞")
        else:
            xs.append(float(r.param_value))
            labels.append(r.param_value)
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(xs, [r.value for r in recs], marker="o", color="k", lw=1)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_xlabel(param)
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def frame_strip(latent: np.ndarray, scale: int = 4) -> np.ndarray:
    """Frames side by side as uint8, values in [-1, 1] mapped to [0, 255]."""
    z = np.asarray(latent, dtype=np.float64)
    frames = [f.mean(axis=0) for f in z]
    strip = np.concatenate(frames, axis=1)
    img = np.clip((strip + 1.0) * 127.5, 0, 255).astype(np.uint8)
    return np.kron(img, np.ones((scale, scale), dtype=np.uint8))


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + image.astype(np.uint8).tobytes())


def write_report(report: RunReport, out: str | os.PathLike, images: bool = False, figures: bool = True) -> Path:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    (root / "metrics.tsv").write_text(format_records(report.metrics), encoding="utf-8")
    (root / "table.txt").write_text(format_table(report.metrics), encoding="utf-8")
    with open(root / "generations.jsonl", "w", encoding="utf-8") as fh:
        for gens in report.generations.values():
            for g in gens:
                fh.write(json.dumps(g.record(), ensure_ascii=False) + "\n")
    records = []
    for key, gens in report.generations.items():
        for i, g in enumerate(gens):
            rid = f"{key}-{i:05d}"
            records.append(Record(rid, g.prompt, g.latent, {"arm": g.arm, "seed": g.seed, "config_hash": g.config_hash, "source_id": g.source_id}))
            if images:
                (root / "images").mkdir(exist_ok=True)
                write_pgm(root / "images" / f"{rid}.pgm", frame_strip(g.latent))
    write_collection(root / "latents", records, {"format": "posgen-generations", "config_hash": report.config_hash})
    meta = {"config_hash": report.config_hash, "prompts": report.prompts, "seeds": report.seeds, "timing": report.timing}
    (root / "run.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    if figures and report.metrics:
        if any(not r.param for r in report.metrics):
            plot_arms(report.metrics, root / "metrics.svg")
        params = sorted({r.param for r in report.metrics if r.param})
        for param in params:
            for name in sorted({r.name for r in report.metrics if r.param == param}):
                plot_sweep(report.metrics, param, name, root / f"sweep_{param}_{name}.svg")
    return root

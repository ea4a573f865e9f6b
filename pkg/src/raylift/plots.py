"""Static SVG figures: per-frame root error and per-timestamp coverage."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed ids and no timestamp so identical data gives byte-identical files.
_SVG_META = {"Date": None, "Creator": None}
matplotlib.rcParams["svg.hashsalt"] = "raylift"


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def root_error_plot(rows, path, rate_hz: float = 30.0) -> None:
    """One line per (label, person) of root error over time.

    ``rows`` are ``(label, frame, person_id, root_error_m)`` tuples.
    """
    fig, ax = plt.subplots(figsize=(7, 3.5))
    series: dict = {}
    for label, frame, pid, err in rows:
        series.setdefault((label, pid), []).append((frame, err))
    for (label, pid), pts in sorted(series.items()):
        pts.sort()
        f, e = np.array(pts).T
        ax.plot(f / rate_hz, e, lw=1.0, label=f"{label} / person {pid}")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("root error [m]")
    if series:
        ax.legend(fontsize="small")
    _save(fig, path)


def coverage_histogram(coverage: dict, path, bins: int = 10) -> None:
    """Share of timestamps per tracked-people fraction, one bar group per run."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    edges = np.linspace(0.0, 1.0, bins + 1)
    labels = list(coverage)
    width = (edges[1] - edges[0]) / max(len(labels), 1)
    for i, label in enumerate(labels):
        values = np.asarray(coverage[label], dtype=float)
        hist, _ = np.histogram(values, bins=edges)
        share = hist / max(len(values), 1)
        ax.bar(edges[:-1] + i * width, share, width=width, align="edge", label=label)
    ax.set_xlabel("fraction of people tracked")
    ax.set_ylabel("proportion of time")
    ax.set_xlim(0, 1)
    if labels:
        ax.legend(fontsize="small")
    _save(fig, path)


def write_traces(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "frame", "person_id", "tracklet_id", "root_error_m"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], row[3], f"{row[4]:.9g}"])


def read_traces(path) -> list:
    with open(path, newline="") as fh:
        return [(r["label"], int(r["frame"]), int(r["person_id"]), int(r["tracklet_id"]),
                 float(r["root_error_m"])) for r in csv.DictReader(fh)]


def write_coverage(path, coverage: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "index", "coverage"])
        for label, values in coverage.items():
            for i, v in enumerate(values):
                w.writerow([label, i, f"{v:.9g}"])


def read_coverage(path) -> dict:
    out: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.setdefault(r["label"], []).append(float(r["coverage"]))
    return {k: np.array(v) for k, v in out.items()}


def render(out_dir, rate_hz: float = 30.0) -> list:
    """Regenerate both figures from ``traces.csv`` and ``coverage.csv`` in ``out_dir``."""
    out = Path(out_dir)
    written = []
    if (out / "traces.csv").exists():
        rows = [(r[0], r[1], r[2], r[4]) for r in read_traces(out / "traces.csv")]
        root_error_plot(rows, out / "root_error.svg", rate_hz)
        written.append(out / "root_error.svg")
    if (out / "coverage.csv").exists():
        coverage_histogram(read_coverage(out / "coverage.csv"), out / "coverage.svg")
        written.append(out / "coverage.svg")
    return written
